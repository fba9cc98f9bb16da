//! Labeled image datasets, deterministic splits, batching and augmentation.

mod augment;
mod cifar;
mod folder;
mod split;
mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use augment::AugmentPolicy;
pub use cifar::{load_cifar10, CifarOptions, CIFAR_CLASSES, CIFAR_FILE_BYTES};
pub use folder::{load_folder, FolderOptions};
pub use split::{stratified_split, stratified_subset, SplitFractions};
pub use synth::{gap_pixel_count, generate_synth_fusion, render_fusion_image, SynthFusionConfig};

/// Images stored as `u8` planes in `[C, H, W]` order, one label each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Samples {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
}

impl Samples {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Samples { channels, height, width, pixels: Vec::new(), labels: Vec::new() }
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn push(&mut self, image: &[u8], label: usize) -> Result<()> {
        if image.len() != self.image_len() {
            return Err(Error::Data(format!(
                "image has {} bytes, expected {}",
                image.len(),
                self.image_len()
            )));
        }
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Samples {
        let mut out = Samples::new(self.channels, self.height, self.width);
        out.pixels.reserve(indices.len() * self.image_len());
        for &i in indices {
            out.pixels.extend_from_slice(self.image(i));
            out.labels.push(self.labels[i]);
        }
        out
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            if l < num_classes {
                counts[l] += 1;
            }
        }
        counts
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.channels as u64).to_le_bytes());
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        h.update(&self.pixels);
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}

/// Per-channel mean and standard deviation of pixel intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        NormStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn from_samples(s: &Samples) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::EmptyDataset("cannot compute normalization of an empty split".into()));
        }
        let plane = s.height * s.width;
        let mut sum = vec![0f64; s.channels];
        let mut sq = vec![0f64; s.channels];
        for i in 0..s.len() {
            for (c, p) in s.image(i).chunks(plane).enumerate() {
                for &v in p {
                    let v = v as f64 / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (s.len() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| ((q / n - m * m).max(0.0).sqrt()).max(1e-3) as f32)
            .collect();
        Ok(NormStats { mean: mean.into_iter().map(|m| m as f32).collect(), std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub seed: u64,
    /// Source-specific facts such as file checksums or generator settings.
    pub details: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Samples,
    pub val: Samples,
    pub test: Samples,
    pub class_names: Vec<String>,
    pub norm: NormStats,
    pub provenance: Provenance,
}

/// JSON-friendly summary of a split, without pixel data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source: String,
    pub seed: u64,
    pub image_shape: [usize; 3],
    pub class_names: Vec<String>,
    pub train_counts: Vec<usize>,
    pub val_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub norm: NormStats,
    pub train_hash: String,
    pub val_hash: String,
    pub test_hash: String,
    pub details: BTreeMap<String, String>,
}

impl DatasetSplit {
    /// Assembles a split from an indexed pool, validating labels and disjointness.
    pub fn from_pool(
        pool: &Samples,
        (train, val, test): (Vec<usize>, Vec<usize>, Vec<usize>),
        class_names: Vec<String>,
        provenance: Provenance,
    ) -> Result<Self> {
        let mut seen = vec![false; pool.len()];
        for &i in train.iter().chain(&val).chain(&test) {
            if i >= pool.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("split index {i} is out of range or repeated")));
            }
        }
        let train = pool.subset(&train);
        let split = DatasetSplit {
            norm: NormStats::from_samples(&train)?,
            train,
            val: pool.subset(&val),
            test: pool.subset(&test),
            class_names,
            provenance,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        for (name, s) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if let Some(&l) = s.labels().iter().find(|&&l| l >= k) {
                return Err(Error::Data(format!("{name} label {l} outside 0..{k}")));
            }
            if (s.channels, s.height, s.width) != (self.train.channels, self.train.height, self.train.width) {
                return Err(Error::Data(format!("{name} image shape differs from train")));
            }
        }
        if self.norm.mean.len() != self.train.channels {
            return Err(Error::Data("normalization statistics do not match channel count".into()));
        }
        Ok(())
    }

    pub fn manifest(&self) -> DatasetManifest {
        let k = self.num_classes();
        DatasetManifest {
            source: self.provenance.source.clone(),
            seed: self.provenance.seed,
            image_shape: [self.train.channels, self.train.height, self.train.width],
            class_names: self.class_names.clone(),
            train_counts: self.train.class_counts(k),
            val_counts: self.val.class_counts(k),
            test_counts: self.test.class_counts(k),
            norm: self.norm.clone(),
            train_hash: self.train.content_hash(),
            val_hash: self.val.content_hash(),
            test_hash: self.test.content_hash(),
            details: self.provenance.details.clone(),
        }
    }
}

/// Normalized `f32` batch `[B, target_channels, H, W]`; single-channel images are
/// replicated across the target channels.
pub fn make_batch(samples: &Samples, indices: &[usize], norm: &NormStats, target_channels: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = (samples.channels, samples.height, samples.width);
    if c != target_channels && c != 1 {
        return Err(Error::Data(format!(
            "cannot map {c}-channel images onto a {target_channels}-channel stem"
        )));
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(indices.len() * target_channels * plane);
    for &i in indices {
        let img = samples.image(i);
        for tc in 0..target_channels {
            let sc = if c == 1 { 0 } else { tc };
            let (m, s) = (norm.mean[sc], norm.std[sc]);
            out.extend(img[sc * plane..(sc + 1) * plane].iter().map(|&v| (v as f32 / 255.0 - m) / s));
        }
    }
    Tensor::from_vec(&[indices.len(), target_channels, h, w], out)
}

/// Sample order for one epoch, determined by the run seed and the global epoch index.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "shuffle", epoch as u64));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool() -> Samples {
        let mut s = Samples::new(1, 2, 2);
        for i in 0..10u8 {
            s.push(&[i, i, 2 * i, 255], (i % 2) as usize).unwrap();
        }
        s
    }

    #[test]
    fn batches_are_normalized_and_replicated() {
        let s = pool();
        let norm = NormStats { mean: vec![0.0], std: vec![1.0] };
        let b = make_batch(&s, &[3], &norm, 3).unwrap();
        assert_eq!(b.shape(), &[1, 3, 2, 2]);
        let want = [3.0 / 255.0, 3.0 / 255.0, 6.0 / 255.0, 1.0];
        for c in 0..3 {
            assert_eq!(&b.data()[c * 4..c * 4 + 4], &want);
        }
        assert!(make_batch(&Samples::new(2, 1, 1), &[], &norm, 3).is_err());
    }

    #[test]
    fn norm_stats_standardize_train() {
        let s = pool();
        let norm = NormStats::from_samples(&s).unwrap();
        let all: Vec<usize> = (0..s.len()).collect();
        let b = make_batch(&s, &all, &norm, 1).unwrap();
        let n = b.len() as f32;
        let mean = b.data().iter().sum::<f32>() / n;
        let var = b.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn pools_reject_overlapping_splits() {
        let s = pool();
        let prov = Provenance { source: "t".into(), seed: 0, details: Default::default() };
        let names = vec!["a".to_string(), "b".to_string()];
        assert!(DatasetSplit::from_pool(&s, (vec![0, 1], vec![1], vec![]), names.clone(), prov.clone()).is_err());
        let ok = DatasetSplit::from_pool(&s, (vec![0, 1, 2], vec![3], vec![4]), names, prov).unwrap();
        assert_eq!(ok.manifest().train_counts, vec![2, 1]);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 3, 2);
        assert_eq!(a, epoch_order(50, 3, 2));
        assert_ne!(a, epoch_order(50, 3, 3));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
