//! Labeled-folder datasets: one subdirectory per class, images inside.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use serde::{Deserialize, Serialize};

use super::{stratified_split, DatasetSplit, Provenance, Samples, SplitFractions};
use crate::error::{Error, Result};

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FolderOptions {
    /// 1 for grayscale, 3 for RGB.
    pub channels: usize,
    /// Images are resized to `size x size`.
    pub size: usize,
    pub split: SplitFractions,
}

impl Default for FolderOptions {
    fn default() -> Self {
        FolderOptions { channels: 1, size: 96, split: SplitFractions::default() }
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn decode(path: &Path, opts: &FolderOptions) -> Result<Vec<u8>> {
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let img = img.resize_exact(opts.size as u32, opts.size as u32, FilterType::Triangle);
    Ok(match opts.channels {
        1 => img.to_luma8().into_raw(),
        _ => {
            let rgb = img.to_rgb8().into_raw();
            let plane = opts.size * opts.size;
            let mut chw = vec![0u8; 3 * plane];
            for (i, px) in rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    chw[c * plane + i] = px[c];
                }
            }
            chw
        }
    })
}

pub fn load_folder(root: impl AsRef<Path>, opts: &FolderOptions, seed: u64) -> Result<DatasetSplit> {
    let root = root.as_ref();
    if opts.channels != 1 && opts.channels != 3 {
        return Err(Error::Data(format!("folder loader supports 1 or 3 channels, not {}", opts.channels)));
    }
    if opts.size == 0 {
        return Err(Error::Data("image size must be positive".into()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no class subdirectories", root.display())));
    }
    let mut pool = Samples::new(opts.channels, opts.size, opts.size);
    let mut class_names = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        for file in sorted_entries(dir)? {
            let ext = file.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default();
            if EXTENSIONS.contains(&ext.as_str()) {
                pool.push(&decode(&file, opts)?, label)?;
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::EmptyDataset(format!("no images found under {}", root.display())));
    }
    let split = stratified_split(pool.labels(), class_names.len(), opts.split, seed)?;
    let mut details = BTreeMap::new();
    details.insert("root".into(), root.display().to_string());
    details.insert("content".into(), pool.content_hash());
    DatasetSplit::from_pool(&pool, split, class_names, Provenance { source: "folder".into(), seed, details })
}
