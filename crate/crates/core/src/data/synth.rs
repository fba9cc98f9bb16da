//! Synthetic ordinal fusion images: two bone lobes separated by a radiolucent cleft that
//! closes stage by stage.
//!
//! In the canonical frame (coordinates in image widths, origin at the centre) the bone is an
//! ellipse with semi-axes 0.40 x 0.30. A vertical band of width ~0.06 through its middle is
//! the cleft. At stage `s` a single contiguous stretch covering `gap_fraction[s]` of the
//! cleft's height stays open (gap intensity); the remainder is bridged by bone. Each image
//! gets its own rotation, translation, scale, intensity jitter and Gaussian noise.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{stratified_split, DatasetSplit, Provenance, Samples, SplitFractions};
use crate::error::{Error, Result};
use crate::rng;

const BACKGROUND: f64 = 0.12;
const GAP: f64 = 0.32;
const BONE: f64 = 0.82;
const HALF_WIDTH: f64 = 0.40;
const HALF_HEIGHT: f64 = 0.30;
const CLEFT_WIDTH: f64 = 0.06;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthFusionConfig {
    pub num_classes: usize,
    pub class_counts: Vec<usize>,
    pub image_size: usize,
    /// Open share of the cleft per stage, strictly decreasing.
    pub gap_fraction_per_stage: Vec<f64>,
    /// Standard deviation of additive Gaussian noise, in intensity units.
    pub noise_level: f64,
    pub seed: u64,
    pub split: SplitFractions,
}

impl Default for SynthFusionConfig {
    fn default() -> Self {
        SynthFusionConfig {
            num_classes: 5,
            class_counts: vec![159, 92, 92, 125, 255],
            image_size: 96,
            gap_fraction_per_stage: vec![1.0, 0.75, 0.5, 0.25, 0.0],
            noise_level: 0.05,
            seed: 0,
            split: SplitFractions::default(),
        }
    }
}

impl SynthFusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("synthetic fusion config: {m}")));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.class_counts.len() != self.num_classes || self.gap_fraction_per_stage.len() != self.num_classes {
            return bad(format!(
                "{} classes but {} counts and {} gap fractions",
                self.num_classes,
                self.class_counts.len(),
                self.gap_fraction_per_stage.len()
            ));
        }
        if self.class_counts.contains(&0) {
            return bad("class counts must be positive".into());
        }
        if self.image_size < 16 {
            return bad(format!("image size {} is too small to draw the anatomy", self.image_size));
        }
        let g = &self.gap_fraction_per_stage;
        if g.iter().any(|f| !(0.0..=1.0).contains(f)) || g.windows(2).any(|w| w[0] <= w[1]) {
            return bad(format!("gap fractions {g:?} must be strictly decreasing within [0, 1]"));
        }
        if !(self.noise_level >= 0.0) {
            return bad("noise level must be non-negative".into());
        }
        self.split.validate()
    }

    pub fn total(&self) -> usize {
        self.class_counts.iter().sum()
    }
}

/// Renders one `size x size` grayscale image whose cleft is open over `gap_fraction` of
/// its height.
pub fn render_fusion_image(size: usize, gap_fraction: f64, noise_level: f64, rng: &mut impl Rng) -> Vec<u8> {
    let angle = rng.random_range(-0.15..0.15f64);
    let (tx, ty) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    let scale = rng.random_range(0.95..1.05);
    let cleft = CLEFT_WIDTH * rng.random_range(0.95..1.05);
    let open_len = 2.0 * HALF_HEIGHT * gap_fraction;
    let open_start = -HALF_HEIGHT + rng.random_range(0.0..=1.0) * (2.0 * HALF_HEIGHT - open_len);
    let intensity = rng.random_range(-0.03..0.03);
    let (sin, cos) = angle.sin_cos();
    let noise = Normal::new(0.0, noise_level.max(f64::MIN_POSITIVE)).expect("valid std");

    let mut out = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let x = (px as f64 + 0.5) / size as f64 - 0.5 - tx;
            let y = (py as f64 + 0.5) / size as f64 - 0.5 - ty;
            let u = (cos * x + sin * y) / scale;
            let v = (-sin * x + cos * y) / scale;
            let in_bone = (u / HALF_WIDTH).powi(2) + (v / HALF_HEIGHT).powi(2) <= 1.0;
            let mut val = if !in_bone {
                BACKGROUND
            } else if u.abs() < cleft / 2.0 && v >= open_start && v < open_start + open_len {
                GAP
            } else {
                BONE
            };
            val += intensity;
            if noise_level > 0.0 {
                val += noise.sample(rng);
            }
            out.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Pixels whose intensity falls strictly between the background/bone levels and around the
/// gap level.
pub fn gap_pixel_count(image: &[u8]) -> usize {
    image.iter().filter(|&&p| (0.25..0.5).contains(&(p as f64 / 255.0))).count()
}

pub fn generate_synth_fusion(cfg: &SynthFusionConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut pool = Samples::new(1, cfg.image_size, cfg.image_size);
    let mut index = 0u64;
    for (stage, &count) in cfg.class_counts.iter().enumerate() {
        for _ in 0..count {
            let mut r = rng::stream(cfg.seed, "synth-fusion", index);
            let img = render_fusion_image(cfg.image_size, cfg.gap_fraction_per_stage[stage], cfg.noise_level, &mut r);
            pool.push(&img, stage)?;
            index += 1;
        }
    }
    let split = stratified_split(pool.labels(), cfg.num_classes, cfg.split, cfg.seed)?;
    let mut details = BTreeMap::new();
    details.insert("config".into(), serde_json::to_string(cfg)?);
    DatasetSplit::from_pool(
        &pool,
        split,
        (1..=cfg.num_classes).map(|s| format!("stage {s}")).collect(),
        Provenance { source: "synth-fusion".into(), seed: cfg.seed, details },
    )
}
