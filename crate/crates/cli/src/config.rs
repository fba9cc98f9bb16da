//! Run configuration: one TOML file plus `--set key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use progrow::backbone::InputShape;
use progrow::data::{
    generate_synth_fusion, load_cifar10, load_folder, AugmentPolicy, CifarOptions, DatasetSplit, FolderOptions,
    SynthFusionConfig,
};
use progrow::optim::{LrSchedule, OptimizerConfig};
use progrow::trainer::LossKind;
use progrow::{BackboneSpec, HeadKind, Preset, ProgressiveSchedule, StagePlan};

use crate::exit::{CliError, Code, Context};

pub const DATA_ENV: &str = "PROGROW_DATA";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Entire,
    #[default]
    Progressive,
    Paired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub backbone: BackboneConfig,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub run: RunSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/latest")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Named architecture; ignored when `spec_file` is set.
    pub preset: Option<Preset>,
    /// JSON-encoded custom backbone spec.
    pub spec_file: Option<PathBuf>,
    /// Divide every width of the preset by this factor.
    #[serde(default = "one")]
    pub width_divisor: usize,
    /// Square input side; defaults to the preset's native size.
    pub image_size: Option<usize>,
    #[serde(default = "three")]
    pub channels: usize,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    SynthFusion,
    Cifar10,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Relative paths resolve against `$PROGROW_DATA` when it is set.
    pub path: Option<PathBuf>,
    /// Seed for generation and splitting; defaults to the run seed.
    pub seed: Option<u64>,
    #[serde(default)]
    pub synth: SynthFusionConfig,
    #[serde(default)]
    pub cifar: CifarOptions,
    #[serde(default)]
    pub folder: FolderOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Stage epochs `e_1..e_K` for the progressive arm; K is their count.
    #[serde(default)]
    pub epochs: Vec<usize>,
    /// Explicit stage sizes; balanced when absent.
    pub sizes: Option<Vec<usize>>,
    /// Entire-model epochs; defaults to the progressive total.
    pub entire_epochs: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_final_head")]
    pub final_head: HeadKind,
    #[serde(default)]
    pub loss: LossKind,
}

fn default_batch() -> usize {
    64
}

fn default_final_head() -> HeadKind {
    HeadKind::Final
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub checkpoints: bool,
    pub epoch_validation: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { checkpoints: true, epoch_validation: true }
    }
}

/// Parses the right-hand side of `--set`: any TOML literal, else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::new(Code::Config, format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::new(Code::Config, format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::new(Code::Config, format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).context(Code::Config, format!("reading {}", path.display()))?;
        Self::parse(&text, overrides).map_err(|e| e.prefixed(&path.display().to_string()))
    }

    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = text.parse().context(Code::Config, "config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().context(Code::Config, "invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::new(Code::Config, m));
        if self.backbone.preset.is_none() && self.backbone.spec_file.is_none() {
            return bad("backbone: set `preset` or `spec_file`".into());
        }
        if self.backbone.width_divisor == 0 {
            return bad("backbone.width_divisor must be positive".into());
        }
        if self.schedule.batch_size == 0 {
            return bad("schedule.batch_size must be positive".into());
        }
        if self.mode != Mode::Entire && self.schedule.epochs.is_empty() {
            return bad(format!("schedule.epochs is required in {:?} mode", self.mode).to_lowercase());
        }
        if let Some(sizes) = &self.schedule.sizes {
            if self.mode != Mode::Entire && sizes.len() != self.schedule.epochs.len() {
                return bad(format!(
                    "schedule.sizes has {} stages but schedule.epochs has {}",
                    sizes.len(),
                    self.schedule.epochs.len()
                ));
            }
        }
        if self.mode == Mode::Paired {
            let total: usize = self.schedule.epochs.iter().sum();
            if let Some(e) = self.schedule.entire_epochs {
                if e != total {
                    return bad(format!(
                        "paired mode needs equal total epochs: schedule.entire_epochs = {e}, sum(schedule.epochs) = {total}"
                    ));
                }
            }
        }
        if self.mode == Mode::Entire && self.schedule.entire_epochs.is_none() && self.schedule.epochs.is_empty() {
            return bad("entire mode needs schedule.entire_epochs".into());
        }
        self.optimizer.validate().context(Code::Config, "optimizer")?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    pub fn entire_epochs(&self) -> usize {
        self.schedule.entire_epochs.unwrap_or_else(|| self.schedule.epochs.iter().sum())
    }

    pub fn load_dataset(&self) -> Result<DatasetSplit, CliError> {
        let seed = self.dataset_seed();
        let d = &self.dataset;
        match d.source {
            DataSource::SynthFusion => {
                let cfg = SynthFusionConfig { seed, ..d.synth.clone() };
                generate_synth_fusion(&cfg).context(Code::Data, "generating synthetic fusion data")
            }
            DataSource::Cifar10 => {
                let dir = resolve_data_path(d.path.as_deref().unwrap_or(Path::new("cifar-10-batches-bin")));
                load_cifar10(&dir, &d.cifar, seed).context(Code::Data, format!("loading CIFAR-10 from {}", dir.display()))
            }
            DataSource::Folder => {
                let Some(p) = &d.path else {
                    return Err(CliError::new(Code::Config, "dataset.path is required for folder datasets"));
                };
                let dir = resolve_data_path(p);
                load_folder(&dir, &d.folder, seed).context(Code::Data, format!("loading images from {}", dir.display()))
            }
        }
    }

    pub fn backbone(&self, num_classes: usize) -> Result<BackboneSpec, CliError> {
        backbone_spec(&self.backbone, num_classes)
    }

    /// The progressive schedule; entire-mode runs derive theirs from it.
    pub fn schedule(&self, spec: &BackboneSpec) -> Result<ProgressiveSchedule, CliError> {
        let s = &self.schedule;
        let epochs = if s.epochs.is_empty() { vec![self.entire_epochs()] } else { s.epochs.clone() };
        let plan = match &s.sizes {
            Some(sizes) => StagePlan::from_sizes(sizes),
            None => StagePlan::new(spec.block_count(), epochs.len()),
        }
        .context(Code::Config, "schedule")?;
        if plan.block_count() != spec.block_count() {
            return Err(CliError::new(
                Code::Config,
                format!("schedule.sizes cover {} blocks but {} has {}", plan.block_count(), spec.name, spec.block_count()),
            ));
        }
        let mut sched = ProgressiveSchedule::new(plan, epochs);
        sched.optimizer = self.optimizer.clone();
        sched.lr_schedule = self.lr_schedule.clone();
        sched.batch_size = s.batch_size;
        sched.seed = self.seed;
        sched.loss = s.loss;
        sched.augment = self.augment.clone();
        sched.final_head = s.final_head;
        Ok(sched)
    }
}

pub fn resolve_data_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_ENV) {
        Some(root) => PathBuf::from(root).join(p),
        None => p.to_path_buf(),
    }
}

pub fn backbone_spec(b: &BackboneConfig, num_classes: usize) -> Result<BackboneSpec, CliError> {
    if let Some(path) = &b.spec_file {
        let text = std::fs::read_to_string(path).context(Code::Config, format!("reading {}", path.display()))?;
        let mut spec: BackboneSpec =
            serde_json::from_str(&text).context(Code::Config, format!("parsing {}", path.display()))?;
        spec.num_classes = num_classes;
        spec.validate().context(Code::Config, "backbone spec")?;
        return Ok(spec);
    }
    let preset = b.preset.expect("validated");
    let input = match b.image_size {
        Some(side) => InputShape::square(b.channels, side),
        None => InputShape { channels: b.channels, ..preset.default_input() },
    };
    preset.scaled(b.width_divisor, num_classes, input).context(Code::Config, "backbone")
}
