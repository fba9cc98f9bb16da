//! Stage-wise training, the grow step, curricula, and the entire-model baseline.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::accounting::{stage_head, CostMode, CostModel};
use crate::backbone::{grow, BackboneSpec, HeadKind, PrefixNetwork};
use crate::checkpoint::{weights_hash, Checkpoint};
use crate::data::{epoch_order, make_batch, AugmentPolicy, DatasetManifest, DatasetSplit};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::nn::{softmax_cross_entropy, zero_grad, Module};
use crate::optim::{LrSchedule, Optimizer, OptimizerConfig};
use crate::partition::StagePlan;
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveSchedule {
    pub plan: StagePlan,
    /// Epochs per stage, `e_1..e_K`.
    pub epochs: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub augment: AugmentPolicy,
    /// Classifier attached at the last stage.
    pub final_head: HeadKind,
}

impl ProgressiveSchedule {
    pub fn new(plan: StagePlan, epochs: Vec<usize>) -> Self {
        ProgressiveSchedule {
            plan,
            epochs,
            optimizer: OptimizerConfig::default(),
            lr_schedule: LrSchedule::default(),
            batch_size: 64,
            seed: 0,
            loss: LossKind::CrossEntropy,
            augment: AugmentPolicy::identity(),
            final_head: HeadKind::Final,
        }
    }

    /// Single-stage schedule with the same hyperparameters: the entire-model baseline.
    pub fn entire(&self, epochs: usize) -> Result<Self> {
        Ok(ProgressiveSchedule {
            plan: StagePlan::new(self.plan.block_count(), 1)?,
            epochs: vec![epochs],
            final_head: HeadKind::Final,
            ..self.clone()
        })
    }

    pub fn num_stages(&self) -> usize {
        self.plan.num_stages()
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs.iter().sum()
    }

    fn check_shape(&self) -> Result<()> {
        if self.epochs.len() != self.plan.num_stages() {
            return Err(Error::InvalidSchedule(format!(
                "{} epoch counts for {} stages",
                self.epochs.len(),
                self.plan.num_stages()
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSchedule("batch size must be positive".into()));
        }
        self.optimizer.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.check_shape()?;
        if self.epochs.last() == Some(&0) {
            return Err(Error::InvalidSchedule("the last stage must train for at least one epoch".into()));
        }
        Ok(())
    }

    fn epochs_before(&self, k: usize) -> usize {
        self.epochs[..k - 1].iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: usize,
    /// 1-based within the stage.
    pub epoch: usize,
    /// 0-based across the run; keys the shuffle and augmentation streams.
    pub global_epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
    pub lr_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage_index: usize,
    pub active_blocks: usize,
    pub head: HeadKind,
    pub epoch_logs: Vec<EpochLog>,
    pub wall_time: f64,
    pub updated_parameter_count: usize,
    pub checkpoint: Option<PathBuf>,
    pub weights_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Entire,
    Progressive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeSummary {
    /// Overall computation, parameter-updates view.
    pub parameter_updates: f64,
    /// Overall computation, multiply-accumulate view.
    pub flops: f64,
    pub per_stage_parameters: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    pub backbone: String,
    pub spec_hash: String,
    pub spec: BackboneSpec,
    pub schedule: ProgressiveSchedule,
    pub dataset: DatasetManifest,
    pub resumed_from_stage: Option<usize>,
    pub stages: Vec<StageResult>,
    pub val: Option<MetricsReport>,
    pub test: Option<MetricsReport>,
    pub compute: Option<ComputeSummary>,
    pub final_weights_hash: Option<String>,
    pub notes: Vec<String>,
    pub wall_time: f64,
}

impl RunReport {
    /// Zeroes every wall-clock field so two reports of the same run compare equal.
    pub fn strip_timing(&mut self) {
        self.wall_time = 0.0;
        for s in &mut self.stages {
            s.wall_time = 0.0;
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per epoch across all stages.
    pub fn epoch_csv(&self) -> String {
        let mut s = String::from("stage,epoch,global_epoch,train_loss,train_accuracy,val_loss,val_accuracy,lr_end\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for stage in &self.stages {
            for e in &stage.epoch_logs {
                s.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    e.stage,
                    e.epoch,
                    e.global_epoch,
                    e.train_loss,
                    e.train_accuracy,
                    opt(e.val_loss),
                    opt(e.val_accuracy),
                    e.lr_end
                ));
            }
        }
        s
    }
}

/// A run that stopped early, with everything completed before the failure.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct RunFailure {
    #[source]
    pub error: Error,
    pub partial: Box<RunReport>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Write `stage-{k}.ckpt` here after every stage.
    pub checkpoint_dir: Option<PathBuf>,
    /// Skip the per-epoch validation pass.
    pub skip_epoch_validation: bool,
}

fn check_data(spec: &BackboneSpec, data: &DatasetSplit) -> Result<()> {
    if data.num_classes() != spec.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, network has {}",
            data.num_classes(),
            spec.num_classes
        )));
    }
    let t = &data.train;
    if (t.height, t.width) != (spec.input.height, spec.input.width) {
        return Err(Error::Data(format!(
            "images are {}x{}, network expects {}x{}",
            t.height, t.width, spec.input.height, spec.input.width
        )));
    }
    if t.channels != spec.input.channels && t.channels != 1 {
        return Err(Error::Data(format!(
            "{}-channel images cannot feed a {}-channel stem",
            t.channels, spec.input.channels
        )));
    }
    Ok(())
}

/// Trains the stage-`k` prefix for `e_k` epochs. Optimizer state and the learning-rate
/// schedule start fresh; shuffling and augmentation follow the global epoch index.
pub fn run_stage(
    net: &mut PrefixNetwork<f32>,
    data: &DatasetSplit,
    sched: &ProgressiveSchedule,
    k: usize,
    opts: &RunOptions,
) -> Result<StageResult> {
    sched.check_shape()?;
    if net.stage() != k {
        return Err(Error::InvalidPlan(format!("network is at stage {} but stage {k} was requested", net.stage())));
    }
    sched.plan.active_blocks(k)?;
    check_data(net.spec(), data)?;
    let train = &data.train;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    let start = Instant::now();
    let epochs = sched.epochs[k - 1];
    let offset = sched.epochs_before(k);
    let bs = sched.batch_size;
    let steps_per_epoch = train.len().div_ceil(bs);
    let total_steps = epochs * steps_per_epoch;
    let channels = net.spec().input.channels;
    let mut opt = Optimizer::<f32>::new(sched.optimizer.clone())?;
    let mut logs = Vec::with_capacity(epochs);
    let mut step = 0;
    for e in 0..epochs {
        let global = offset + e;
        let order = epoch_order(train.len(), sched.seed, global);
        let mut aug_rng = rng::stream(sched.seed, "augment", global as u64);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut lr = 0.0;
        for (b, idx) in order.chunks(bs).enumerate() {
            let mut x = make_batch(train, idx, &data.norm, channels)?;
            sched.augment.apply(&mut x, &mut aug_rng)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.label(i)).collect();
            zero_grad(net);
            let logits = net.forward_train(&x)?;
            let out = softmax_cross_entropy(&logits, &labels)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss { stage: k, epoch: e + 1, batch: b, loss: out.loss as f64 });
            }
            net.backward(&out.grad)?;
            lr = sched.optimizer.lr * sched.lr_schedule.factor(step, total_steps, steps_per_epoch);
            opt.step(net, lr);
            step += 1;
            loss_sum += out.loss as f64 * idx.len() as f64;
            correct += out.correct;
        }
        let (val_loss, val_accuracy) = if opts.skip_epoch_validation || data.val.is_empty() {
            (None, None)
        } else {
            let m = evaluate(net, &data.val, &data.norm, bs.max(64), "val")?;
            (m.mean_loss, Some(m.accuracy))
        };
        let log = EpochLog {
            stage: k,
            epoch: e + 1,
            global_epoch: global,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
            lr_end: lr,
        };
        info!(
            "stage {k} epoch {}/{epochs}: loss {:.4} acc {:.4} val acc {}",
            e + 1,
            log.train_loss,
            log.train_accuracy,
            log.val_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        );
        logs.push(log);
    }
    let ckpt = Checkpoint::from_network(net, offset + epochs);
    let checkpoint = match &opts.checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(format!("stage-{k}.ckpt"));
            ckpt.save(&path)?;
            Some(path)
        }
        None => None,
    };
    Ok(StageResult {
        stage_index: k,
        active_blocks: net.active_blocks(),
        head: net.head_kind(),
        epoch_logs: logs,
        wall_time: start.elapsed().as_secs_f64(),
        updated_parameter_count: net.trainable_param_count(),
        checkpoint,
        weights_hash: ckpt.weights_hash(),
    })
}

fn compute_summary(spec: &BackboneSpec, sched: &ProgressiveSchedule) -> Result<ComputeSummary> {
    let pu = CostModel::new(spec, &sched.plan, sched.final_head, CostMode::ParameterUpdates)?;
    let fl = CostModel::new(spec, &sched.plan, sched.final_head, CostMode::Flops)?;
    Ok(ComputeSummary {
        parameter_updates: pu.overall_computation(&sched.epochs)?,
        flops: fl.overall_computation(&sched.epochs)?,
        per_stage_parameters: pu.per_stage_cost.iter().map(|&c| c as usize).collect(),
    })
}

fn notes(mode: RunMode, sched: &ProgressiveSchedule) -> Vec<String> {
    let mut n = vec![
        "all weights start from random initialization; no pretrained weights are loaded".to_string(),
        "overall computation: parameter-updates view is sum(e_k * trainable params at stage k) / \
         (sum(e_k) * full-network params); the flops view weighs stages by multiply-accumulates"
            .to_string(),
        "optimizer state and learning-rate schedule restart at every stage".to_string(),
    ];
    if mode == RunMode::Progressive && sched.num_stages() == 1 {
        n.push("single-stage curriculum: equivalent to entire-model training with the same seed".into());
    }
    n
}

struct Run<'a> {
    spec: &'a BackboneSpec,
    sched: &'a ProgressiveSchedule,
    data: &'a DatasetSplit,
    opts: &'a RunOptions,
    report: RunReport,
    start: Instant,
}

impl<'a> Run<'a> {
    fn new(
        spec: &'a BackboneSpec,
        sched: &'a ProgressiveSchedule,
        data: &'a DatasetSplit,
        opts: &'a RunOptions,
        mode: RunMode,
    ) -> Self {
        Run {
            report: RunReport {
                mode,
                backbone: spec.name.clone(),
                spec_hash: spec.hash(),
                spec: spec.clone(),
                schedule: sched.clone(),
                dataset: data.manifest(),
                resumed_from_stage: None,
                stages: Vec::new(),
                val: None,
                test: None,
                compute: None,
                final_weights_hash: None,
                notes: notes(mode, sched),
                wall_time: 0.0,
            },
            spec,
            sched,
            data,
            opts,
            start: Instant::now(),
        }
    }

    fn fail(mut self, error: Error) -> Box<RunFailure> {
        self.report.wall_time = self.start.elapsed().as_secs_f64();
        Box::new(RunFailure { error, partial: Box::new(self.report) })
    }

    /// Trains stages `first..=K` starting from `net`, which must be at stage `first` or
    /// at stage `first - 1` (then it is grown first).
    fn execute(mut self, mut net: PrefixNetwork<f32>, first: usize) -> Result<RunReport, Box<RunFailure>> {
        macro_rules! tryf {
            ($e:expr) => {
                match $e {
                    Ok(v) => v,
                    Err(e) => return Err(self.fail(e)),
                }
            };
        }
        tryf!(check_data(self.spec, self.data));
        if self.sched.total_epochs() > 0 {
            self.report.compute = Some(tryf!(compute_summary(self.spec, self.sched)));
        }
        let k_max = self.sched.num_stages();
        for k in first..=k_max {
            if net.stage() + 1 == k {
                let head = stage_head(&self.sched.plan, k, self.sched.final_head);
                net = tryf!(grow(net, head, self.sched.seed));
            }
            let result = tryf!(run_stage(&mut net, self.data, self.sched, k, self.opts));
            self.report.stages.push(result);
        }
        let bs = self.sched.batch_size.max(64);
        if !self.data.val.is_empty() {
            self.report.val = Some(tryf!(evaluate(&net, &self.data.val, &self.data.norm, bs, "val")));
        }
        if !self.data.test.is_empty() {
            self.report.test = Some(tryf!(evaluate(&net, &self.data.test, &self.data.norm, bs, "test")));
        }
        self.report.final_weights_hash = Some(weights_hash(&net));
        self.report.wall_time = self.start.elapsed().as_secs_f64();
        Ok(self.report)
    }
}

fn initial_network(spec: &BackboneSpec, sched: &ProgressiveSchedule) -> Result<PrefixNetwork<f32>> {
    let head = stage_head(&sched.plan, 1, sched.final_head);
    PrefixNetwork::new(spec, &sched.plan, 1, head, sched.seed)
}

/// Runs stages `1..=K`, growing the network between stages, and evaluates the final
/// network on the validation and test splits.
pub fn run_curriculum(
    spec: &BackboneSpec,
    sched: &ProgressiveSchedule,
    data: &DatasetSplit,
    opts: &RunOptions,
) -> Result<RunReport, Box<RunFailure>> {
    let run = Run::new(spec, sched, data, opts, RunMode::Progressive);
    if let Err(e) = sched.validate() {
        return Err(run.fail(e));
    }
    match initial_network(spec, sched) {
        Ok(net) => run.execute(net, 1),
        Err(e) => Err(run.fail(e)),
    }
}

/// Continues a curriculum from the checkpoint written at the end of a completed stage.
/// Data order and augmentation pick up where the interrupted run would have been.
pub fn resume_curriculum(
    spec: &BackboneSpec,
    sched: &ProgressiveSchedule,
    data: &DatasetSplit,
    checkpoint: &Path,
    opts: &RunOptions,
) -> Result<RunReport, Box<RunFailure>> {
    let mut run = Run::new(spec, sched, data, opts, RunMode::Progressive);
    let loaded = (|| -> Result<(PrefixNetwork<f32>, usize)> {
        sched.validate()?;
        let ckpt = Checkpoint::load(checkpoint)?;
        ckpt.validate_against(spec)?;
        let m = &ckpt.manifest;
        if m.plan != sched.plan.sizes() || m.seed != sched.seed {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint plan {:?} / seed {} do not match schedule plan {:?} / seed {}",
                m.plan,
                m.seed,
                sched.plan.sizes(),
                sched.seed
            )));
        }
        let k = m.stage_index;
        sched.plan.active_blocks(k)?;
        if m.epoch != sched.epochs_before(k + 1) {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint is at epoch {} but stage {k} ends at epoch {}",
                m.epoch,
                sched.epochs_before(k + 1)
            )));
        }
        if k == sched.num_stages() {
            return Err(Error::CheckpointMismatch("checkpoint is already at the last stage".into()));
        }
        Ok((ckpt.to_network()?, k))
    })();
    match loaded {
        Ok((net, k)) => {
            run.report.resumed_from_stage = Some(k);
            run.report.notes.push(format!("resumed after stage {k} from {}", checkpoint.display()));
            run.execute(net, k + 1)
        }
        Err(e) => Err(run.fail(e)),
    }
}

/// Trains the full network with its standard classifier for `epochs` epochs, using the
/// optimizer, batching, seed and augmentation of `template`. With `epochs = 0` the freshly
/// initialized network is evaluated.
pub fn train_entire(
    spec: &BackboneSpec,
    template: &ProgressiveSchedule,
    epochs: usize,
    data: &DatasetSplit,
    opts: &RunOptions,
) -> Result<RunReport, Box<RunFailure>> {
    let sched = match template.entire(epochs) {
        Ok(s) => s,
        Err(e) => return Err(Run::new(spec, template, data, opts, RunMode::Entire).fail(e)),
    };
    let run = Run::new(spec, &sched, data, opts, RunMode::Entire);
    if let Err(e) = sched.check_shape() {
        return Err(run.fail(e));
    }
    let net = match initial_network(spec, &sched) {
        Ok(n) => n,
        Err(e) => return Err(run.fail(e)),
    };
    let mut report = run.execute(net, 1)?;
    report.schedule = sched.clone();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub epochs: String,
    pub backbone: String,
    pub mode: RunMode,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Relative to entire-model training; absent for the entire-model row.
    pub overall_computation: Option<f64>,
}

impl ComparisonRow {
    pub fn from_report(r: &RunReport) -> Option<Self> {
        let t = r.test.as_ref()?;
        Some(ComparisonRow {
            epochs: r.schedule.epochs.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(", "),
            backbone: r.backbone.clone(),
            mode: r.mode,
            accuracy: t.accuracy,
            precision: t.weighted.precision,
            recall: t.weighted.recall,
            f1: t.weighted.f1,
            overall_computation: match r.mode {
                RunMode::Entire => None,
                RunMode::Progressive => r.compute.as_ref().map(|c| c.parameter_updates),
            },
        })
    }
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut s = format!(
        "{:<16} {:<20} {:<12} {:>8} {:>26} {:>12}\n",
        "epochs", "backbone", "mode", "accuracy", "avg prec / rec / f1", "computation"
    );
    for r in rows {
        let mode = match r.mode {
            RunMode::Entire => "Entire",
            RunMode::Progressive => "Progressive",
        };
        let comp = r.overall_computation.map_or("---".to_string(), |c| format!("{:.1}%", 100.0 * c));
        let prf = format!("{:.4} / {:.4} / {:.4}", r.precision, r.recall, r.f1);
        s.push_str(&format!(
            "{:<16} {:<20} {:<12} {:>8.4} {:>26} {:>12}\n",
            r.epochs, r.backbone, mode, r.accuracy, prf, comp
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedReport {
    pub entire: RunReport,
    pub progressive: RunReport,
    pub rows: Vec<ComparisonRow>,
}

/// Entire-model and progressive runs with identical seed, data order and augmentation.
/// Both arms must train for the same total number of epochs.
pub fn run_paired(
    spec: &BackboneSpec,
    sched: &ProgressiveSchedule,
    entire_epochs: usize,
    data: &DatasetSplit,
    opts: &RunOptions,
) -> Result<PairedReport, Box<RunFailure>> {
    let arm = |name: &str| RunOptions {
        checkpoint_dir: opts.checkpoint_dir.as_ref().map(|d| d.join(name)),
        ..opts.clone()
    };
    if entire_epochs != sched.total_epochs() {
        let e = Error::InvalidSchedule(format!(
            "paired arms must train equally long: entire {entire_epochs} vs progressive {}",
            sched.total_epochs()
        ));
        return Err(Run::new(spec, sched, data, opts, RunMode::Entire).fail(e));
    }
    let entire = train_entire(spec, sched, entire_epochs, data, &arm("entire"))?;
    let progressive = run_curriculum(spec, sched, data, &arm("progressive"))?;
    let rows = [&entire, &progressive].iter().filter_map(|r| ComparisonRow::from_report(r)).collect();
    Ok(PairedReport { entire, progressive, rows })
}
