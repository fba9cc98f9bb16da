//! CIFAR-10, binary version: five training files and one test file of 10,000 records, each
//! record a label byte followed by the red, green and blue 32x32 planes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{stratified_split, stratified_subset, DatasetSplit, Provenance, Samples, SplitFractions};
use crate::error::{Error, Result};

const SIDE: usize = 32;
const RECORD: usize = 1 + 3 * SIDE * SIDE;
const RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_FILE_BYTES: usize = RECORD * RECORDS_PER_FILE;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

pub const CIFAR_CLASSES: [&str; 10] =
    ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CifarOptions {
    /// Share of the 50,000 training images held out for validation (stratified).
    pub val_fraction: f64,
    /// Train on a stratified subset of this many of the remaining training images.
    pub train_subset: Option<usize>,
}

impl Default for CifarOptions {
    fn default() -> Self {
        CifarOptions { val_fraction: 0.1, train_subset: None }
    }
}

fn read_file(dir: &Path, name: &str, pool: &mut Samples, details: &mut BTreeMap<String, String>) -> Result<()> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != CIFAR_FILE_BYTES {
        let detail = if bytes.len() < CIFAR_FILE_BYTES {
            format!("{} bytes short", CIFAR_FILE_BYTES - bytes.len())
        } else {
            format!("{} bytes too long", bytes.len() - CIFAR_FILE_BYTES)
        };
        return Err(Error::Data(format!(
            "{}: expected {CIFAR_FILE_BYTES} bytes, found {} ({detail})",
            path.display(),
            bytes.len()
        )));
    }
    details.insert(format!("sha256:{name}"), hex::encode(Sha256::digest(&bytes)));
    for rec in bytes.chunks_exact(RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Data(format!("{}: label byte {label} outside 0..10", path.display())));
        }
        pool.push(&rec[1..], label)?;
    }
    Ok(())
}

/// Loads the binary CIFAR-10 files in `dir` (typically `cifar-10-batches-bin`). The
/// validation split and optional training subset are drawn deterministically from `seed`.
pub fn load_cifar10(dir: impl AsRef<Path>, opts: &CifarOptions, seed: u64) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    let mut details = BTreeMap::new();
    let mut train_pool = Samples::new(3, SIDE, SIDE);
    for name in TRAIN_FILES {
        read_file(dir, name, &mut train_pool, &mut details)?;
    }
    let mut test = Samples::new(3, SIDE, SIDE);
    read_file(dir, TEST_FILE, &mut test, &mut details)?;

    let fractions = SplitFractions { train: 1.0 - opts.val_fraction, val: opts.val_fraction, test: 0.0 };
    let (mut train_idx, val_idx, _) = stratified_split(train_pool.labels(), 10, fractions, seed)?;
    if let Some(n) = opts.train_subset {
        let labels: Vec<usize> = train_idx.iter().map(|&i| train_pool.label(i)).collect();
        let picked = stratified_subset(&labels, 10, n, seed)?;
        train_idx = picked.into_iter().map(|j| train_idx[j]).collect();
        details.insert("train_subset".into(), n.to_string());
    }
    details.insert("val_fraction".into(), opts.val_fraction.to_string());

    let class_names = match fs::read_to_string(dir.join("batches.meta.txt")) {
        Ok(text) => {
            let names: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
            if names.len() == 10 {
                names
            } else {
                CIFAR_CLASSES.iter().map(|s| s.to_string()).collect()
            }
        }
        Err(_) => CIFAR_CLASSES.iter().map(|s| s.to_string()).collect(),
    };

    let train = train_pool.subset(&train_idx);
    let split = DatasetSplit {
        norm: super::NormStats::from_samples(&train)?,
        train,
        val: train_pool.subset(&val_idx),
        test,
        class_names,
        provenance: Provenance { source: "cifar10".into(), seed, details },
    };
    split.validate()?;
    Ok(split)
}
