use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Tensor;

/// Per-sample random transforms applied to normalized batches. All randomness comes from
/// the stream passed to [`AugmentPolicy::apply`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    /// Probability of mirroring an image left to right.
    pub hflip: f64,
    /// Random crop after zero padding by this many pixels on each side.
    pub crop_padding: usize,
    /// Additive intensity shift drawn from `[-brightness, brightness]` (normalized units).
    pub brightness: f64,
    /// Multiplicative factor drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn apply(&self, batch: &mut Tensor<f32>, rng: &mut impl Rng) -> Result<()> {
        batch.expect_ndim("augment batch", 4)?;
        if self.is_identity() {
            return Ok(());
        }
        let (b, c, h, w) = (batch.dim(0), batch.dim(1), batch.dim(2), batch.dim(3));
        let n = c * h * w;
        let mut scratch = vec![0f32; n];
        for img in batch.data_mut().chunks_mut(n).take(b) {
            if self.hflip > 0.0 && rng.random::<f64>() < self.hflip {
                for row in img.chunks_mut(w) {
                    row.reverse();
                }
            }
            if self.crop_padding > 0 {
                let p = self.crop_padding as i64;
                let dy = rng.random_range(-p..=p) as isize;
                let dx = rng.random_range(-p..=p) as isize;
                scratch.copy_from_slice(img);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let (sy, sx) = (y as isize + dy, x as isize + dx);
                            let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                            img[ch * h * w + y * w + x] =
                                if inside { scratch[ch * h * w + sy as usize * w + sx as usize] } else { 0.0 };
                        }
                    }
                }
            }
            if self.contrast > 0.0 || self.brightness > 0.0 {
                let scale = 1.0 + if self.contrast > 0.0 { rng.random_range(-self.contrast..=self.contrast) } else { 0.0 };
                let shift =
                    if self.brightness > 0.0 { rng.random_range(-self.brightness..=self.brightness) } else { 0.0 };
                for v in img.iter_mut() {
                    *v = (*v as f64 * scale + shift) as f32;
                }
            }
        }
        Ok(())
    }
}
