use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use progrow::accounting::{stage_head, CostMode, CostModel};
use progrow::checkpoint::Checkpoint;
use progrow::metrics::{evaluate, MetricsReport};
use progrow::trainer::{
    comparison_table, resume_curriculum, ComparisonRow, RunFailure, RunOptions, RunReport,
};
use progrow::{run_curriculum, train_entire, HeadKind, StagePlan};

use crate::config::{backbone_spec, BackboneConfig, Mode, RunConfig};
use crate::exit::{classify, CliError, Code, Context};
use crate::{BackboneArgs, ConfigArgs};

pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub config_hash: String,
    pub mode: Mode,
    pub error: Option<String>,
    pub entire: Option<RunReport>,
    pub progressive: Option<RunReport>,
    pub comparison: Vec<ComparisonRow>,
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).context(Code::Output, format!("writing {}", path.display()))
}

fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = String::from("mode,epochs,backbone,accuracy,precision,recall,f1,overall_computation\n");
    for r in rows {
        let mode = serde_json::to_value(r.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        s.push_str(&format!(
            "{mode},\"{}\",{},{},{},{},{},{}\n",
            r.epochs,
            r.backbone,
            r.accuracy,
            r.precision,
            r.recall,
            r.f1,
            r.overall_computation.map(|c| c.to_string()).unwrap_or_default()
        ));
    }
    s
}

fn write_arm(out: &Path, arm: &str, r: &RunReport, class_names: &[String]) -> Result<(), CliError> {
    write(&out.join(format!("{arm}-epochs.csv")), &r.epoch_csv())?;
    if let Some(t) = &r.test {
        write(&out.join(format!("{arm}-confusion.csv")), &t.confusion_csv(class_names))?;
        println!("{arm} test metrics\n{}", t.to_table(class_names));
    }
    Ok(())
}

pub fn train(args: &ConfigArgs, out: Option<PathBuf>, resume: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config, &args.sets)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    if resume.is_some() && cfg.mode != Mode::Progressive {
        return Err(CliError::new(Code::Config, "--resume only applies to progressive mode"));
    }
    let data = cfg.load_dataset()?;
    let spec = cfg.backbone(data.num_classes())?;
    let sched = cfg.schedule(&spec)?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out).context(Code::Output, format!("creating {}", out.display()))?;
    info!("{} on {} ({} train / {} val / {} test), config {}", spec.name, data.provenance.source, data.train.len(), data.val.len(), data.test.len(), &cfg.hash()[..12]);

    let opts = |arm: &str| RunOptions {
        checkpoint_dir: cfg.run.checkpoints.then(|| out.join("checkpoints").join(arm)),
        skip_epoch_validation: !cfg.run.epoch_validation,
    };
    let mut report = TrainReport {
        tool: "progrow".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        mode: cfg.mode,
        error: None,
        entire: None,
        progressive: None,
        comparison: Vec::new(),
    };
    let mut failure: Option<Box<RunFailure>> = None;
    if matches!(cfg.mode, Mode::Entire | Mode::Paired) {
        match train_entire(&spec, &sched, cfg.entire_epochs(), &data, &opts("entire")) {
            Ok(r) => report.entire = Some(r),
            Err(f) => failure = Some(f),
        }
    }
    if failure.is_none() && matches!(cfg.mode, Mode::Progressive | Mode::Paired) {
        let run = match &resume {
            Some(ckpt) => resume_curriculum(&spec, &sched, &data, ckpt, &opts("progressive")),
            None => run_curriculum(&spec, &sched, &data, &opts("progressive")),
        };
        match run {
            Ok(r) => report.progressive = Some(r),
            Err(f) => failure = Some(f),
        }
    }
    if let Some(f) = &failure {
        report.error = Some(f.error.to_string());
        let partial = (*f.partial).clone();
        match partial.mode {
            progrow::trainer::RunMode::Entire => report.entire = Some(partial),
            progrow::trainer::RunMode::Progressive => report.progressive = Some(partial),
        }
    }
    report.comparison = [&report.entire, &report.progressive]
        .into_iter()
        .flatten()
        .filter_map(ComparisonRow::from_report)
        .collect();

    let json = serde_json::to_string_pretty(&report).context(Code::Output, "serializing report")?;
    write(&out.join(REPORT_FILE), &json)?;
    for (arm, r) in [("entire", &report.entire), ("progressive", &report.progressive)] {
        if let Some(r) = r {
            write_arm(&out, arm, r, &data.class_names)?;
        }
    }
    if !report.comparison.is_empty() {
        let table = comparison_table(&report.comparison);
        write(&out.join("comparison.txt"), &table)?;
        write(&out.join("comparison.csv"), &comparison_csv(&report.comparison))?;
        println!("{table}");
    }
    println!("report written to {}", out.join(REPORT_FILE).display());
    match failure {
        Some(f) => {
            let code = match classify(&f.error) {
                Code::Config | Code::Data | Code::Checkpoint => classify(&f.error),
                _ => Code::Training,
            };
            Err(CliError::new(code, format!("training failed: {}", f.error)))
        }
        None => Ok(()),
    }
}

pub fn eval(args: &ConfigArgs, checkpoint: &Path, split: &str, out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config, &args.sets)?;
    let data = cfg.load_dataset()?;
    let ckpt = Checkpoint::load(checkpoint).context(Code::Checkpoint, format!("reading {}", checkpoint.display()))?;
    let m = &ckpt.manifest;
    if m.num_classes != data.num_classes() {
        return Err(CliError::new(
            Code::Checkpoint,
            format!("manifest mismatch: checkpoint has {} classes, dataset has {}", m.num_classes, data.num_classes()),
        ));
    }
    let input = m.spec.input;
    if (input.height, input.width) != (data.train.height, data.train.width) {
        return Err(CliError::new(
            Code::Checkpoint,
            format!(
                "manifest mismatch: checkpoint expects {}x{} images, dataset has {}x{}",
                input.height, input.width, data.train.height, data.train.width
            ),
        ));
    }
    let net = ckpt.to_network::<f32>().context(Code::Checkpoint, "restoring network")?;
    let samples = match split {
        "train" => &data.train,
        "val" => &data.val,
        _ => &data.test,
    };
    let report: MetricsReport =
        evaluate(&net, samples, &data.norm, cfg.schedule.batch_size.max(64), split).map_err(CliError::from)?;
    println!(
        "{} stage {} ({} blocks), {split} split, {} samples\n{}",
        m.spec.name,
        m.stage_index,
        net.active_blocks(),
        report.sample_count,
        report.to_table(&data.class_names)
    );
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(&report).context(Code::Output, "serializing metrics")?;
        write(&path, &json)?;
    }
    Ok(())
}

fn preset_spec(b: &BackboneArgs) -> Result<progrow::BackboneSpec, CliError> {
    let cfg = BackboneConfig {
        preset: Some(b.backbone),
        spec_file: None,
        width_divisor: b.width_divisor,
        image_size: b.image_size,
        channels: 3,
    };
    backbone_spec(&cfg, b.classes)
}

#[derive(Serialize)]
struct StageRow {
    stage: usize,
    size: usize,
    first_block: usize,
    last_block: usize,
    block_params: usize,
    head: HeadKind,
    prefix_params: usize,
}

#[derive(Serialize)]
struct PartitionOutput {
    backbone: String,
    block_count: usize,
    stages: usize,
    sizes: Vec<usize>,
    cut_points: Vec<usize>,
    rows: Vec<StageRow>,
}

pub fn partition(b: &BackboneArgs, k: usize, json: bool) -> Result<(), CliError> {
    let spec = preset_spec(b)?;
    let plan = StagePlan::new(spec.block_count(), k)?;
    let mut rows = Vec::new();
    for s in 1..=k {
        let range = plan.stage_blocks(s)?;
        let head = stage_head(&plan, s, HeadKind::Final);
        rows.push(StageRow {
            stage: s,
            size: range.len(),
            first_block: range.start + 1,
            last_block: range.end,
            block_params: range.clone().map(|i| spec.block_param_count(i)).sum(),
            head,
            prefix_params: spec.prefix_param_count(range.end, head),
        });
    }
    let output = PartitionOutput {
        backbone: spec.name.clone(),
        block_count: spec.block_count(),
        stages: k,
        sizes: plan.sizes().to_vec(),
        cut_points: plan.cut_points().to_vec(),
        rows,
    };
    let encoded = serde_json::to_string_pretty(&output).context(Code::Output, "serializing partition")?;
    if json {
        println!("{encoded}");
        return Ok(());
    }
    println!("{}: {} blocks in {k} stages, sizes {:?}", output.backbone, output.block_count, output.sizes);
    println!("{:>5} {:>6} {:>10} {:>14} {:>12} {:>16}", "stage", "blocks", "range", "block params", "head", "prefix params");
    for r in &output.rows {
        let head = if r.head == HeadKind::Final { "final" } else { "progressive" };
        println!(
            "{:>5} {:>6} {:>10} {:>14} {:>12} {:>16}",
            r.stage,
            r.size,
            format!("{}-{}", r.first_block, r.last_block),
            r.block_params,
            head,
            r.prefix_params
        );
    }
    println!("{encoded}");
    Ok(())
}

#[derive(Serialize)]
struct CostRow {
    stage: usize,
    active_blocks: usize,
    epochs: usize,
    trainable_params: f64,
    param_share: f64,
    train_flops_per_sample: f64,
    flop_share: f64,
}

#[derive(Serialize)]
struct ComputeOutput {
    backbone: String,
    sizes: Vec<usize>,
    epochs: Vec<usize>,
    rows: Vec<CostRow>,
    parameter_updates: f64,
    flops: f64,
    note: &'static str,
}

const COST_NOTE: &str = "parameter-updates is the default view: sum(e_k * params_k) / (sum(e_k) * params_full); \
the flops view weighs each stage by its training multiply-accumulates per sample";

pub fn compute_report(
    b: &BackboneArgs,
    epochs: &[usize],
    sizes: Option<Vec<usize>>,
    final_head: &str,
    json: bool,
) -> Result<(), CliError> {
    let spec = preset_spec(b)?;
    let plan = match sizes {
        Some(s) => StagePlan::from_sizes(&s)?,
        None => StagePlan::new(spec.block_count(), epochs.len())?,
    };
    if plan.block_count() != spec.block_count() || plan.num_stages() != epochs.len() {
        return Err(CliError::new(
            Code::Config,
            format!(
                "schedule/plan mismatch: {} epoch counts and sizes {:?} for {} blocks",
                epochs.len(),
                plan.sizes(),
                spec.block_count()
            ),
        ));
    }
    let head = if final_head == "progressive" { HeadKind::Progressive } else { HeadKind::Final };
    let pu = CostModel::new(&spec, &plan, head, CostMode::ParameterUpdates)?;
    let fl = CostModel::new(&spec, &plan, head, CostMode::Flops)?;
    let rows = (1..=plan.num_stages())
        .map(|k| CostRow {
            stage: k,
            active_blocks: plan.cut_points()[k - 1],
            epochs: epochs[k - 1],
            trainable_params: pu.per_stage_cost[k - 1],
            param_share: pu.per_stage_cost[k - 1] / pu.full_cost,
            train_flops_per_sample: fl.per_stage_cost[k - 1],
            flop_share: fl.per_stage_cost[k - 1] / fl.full_cost,
        })
        .collect();
    let output = ComputeOutput {
        backbone: spec.name.clone(),
        sizes: plan.sizes().to_vec(),
        epochs: epochs.to_vec(),
        rows,
        parameter_updates: pu.overall_computation(epochs)?,
        flops: fl.overall_computation(epochs)?,
        note: COST_NOTE,
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&output).context(Code::Output, "serializing report")?);
        return Ok(());
    }
    println!("{}: sizes {:?}, epochs {:?}", output.backbone, output.sizes, output.epochs);
    println!("{:>5} {:>6} {:>7} {:>14} {:>8} {:>16} {:>8}", "stage", "blocks", "epochs", "params", "share", "train flops", "share");
    for r in &output.rows {
        println!(
            "{:>5} {:>6} {:>7} {:>14} {:>7.1}% {:>16.4e} {:>7.1}%",
            r.stage,
            r.active_blocks,
            r.epochs,
            r.trainable_params,
            100.0 * r.param_share,
            r.train_flops_per_sample,
            100.0 * r.flop_share
        );
    }
    println!("overall computation (parameter updates): {:.1}%", 100.0 * output.parameter_updates);
    println!("overall computation (flops):             {:.1}%", 100.0 * output.flops);
    println!("note: {COST_NOTE}");
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SweepRun {
    seed: u64,
    exit_code: Option<i32>,
    report: Option<PathBuf>,
    entire_accuracy: Option<f64>,
    progressive_accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Summary {
    n: usize,
    mean: f64,
    std: f64,
}

fn summarize(v: &[f64]) -> Option<Summary> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    Some(Summary { n: v.len(), mean, std: var.sqrt() })
}

#[derive(Serialize, Deserialize)]
struct SweepOutput {
    config_hash: String,
    seeds: Vec<u64>,
    runs: Vec<SweepRun>,
    entire: Option<Summary>,
    progressive: Option<Summary>,
}

pub fn sweep(args: &ConfigArgs, seeds: &[u64], out: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = RunConfig::load(&args.config, &args.sets)?;
    let base = out.unwrap_or_else(|| cfg.output_dir.clone());
    fs::create_dir_all(&base).context(Code::Output, format!("creating {}", base.display()))?;
    let exe = std::env::current_exe().context(Code::Output, "locating the progrow executable")?;
    let mut runs = Vec::new();
    for &seed in seeds {
        let dir = base.join(format!("seed-{seed}"));
        info!("seed {seed} -> {}", dir.display());
        let mut cmd = Command::new(&exe);
        cmd.arg("train").arg("--config").arg(&args.config);
        for s in &args.sets {
            cmd.arg("--set").arg(s);
        }
        cmd.arg("--set").arg(format!("seed={seed}")).arg("--out").arg(&dir);
        let status = cmd.status().context(Code::Output, "launching child run")?;
        let path = dir.join(REPORT_FILE);
        let report: Option<TrainReport> =
            fs::read_to_string(&path).ok().and_then(|t| serde_json::from_str(&t).ok());
        if !status.success() {
            warn!("seed {seed} exited with {status}");
        }
        let acc = |r: &Option<RunReport>| r.as_ref().and_then(|r| r.test.as_ref()).map(|t| t.accuracy);
        runs.push(SweepRun {
            seed,
            exit_code: status.code(),
            report: report.as_ref().map(|_| path.clone()),
            entire_accuracy: report.as_ref().and_then(|r| r.error.is_none().then(|| acc(&r.entire)).flatten()),
            progressive_accuracy: report.as_ref().and_then(|r| r.error.is_none().then(|| acc(&r.progressive)).flatten()),
        });
    }
    let collect = |f: fn(&SweepRun) -> Option<f64>| runs.iter().filter_map(f).collect::<Vec<_>>();
    let output = SweepOutput {
        config_hash: cfg.hash(),
        seeds: seeds.to_vec(),
        entire: summarize(&collect(|r| r.entire_accuracy)),
        progressive: summarize(&collect(|r| r.progressive_accuracy)),
        runs,
    };
    let json = serde_json::to_string_pretty(&output).context(Code::Output, "serializing sweep")?;
    write(&base.join("sweep.json"), &json)?;
    println!("{:>6} {:>6} {:>10} {:>12}", "seed", "exit", "entire", "progressive");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{a:.4}"));
    for r in &output.runs {
        let code = r.exit_code.map_or("-".to_string(), |c| c.to_string());
        println!("{:>6} {:>6} {:>10} {:>12}", r.seed, code, fmt(r.entire_accuracy), fmt(r.progressive_accuracy));
    }
    for (name, s) in [("entire", &output.entire), ("progressive", &output.progressive)] {
        if let Some(s) = s {
            println!("{name}: mean {:.4} std {:.4} over {} seeds", s.mean, s.std, s.n);
        }
    }
    if output.runs.iter().any(|r| r.exit_code != Some(0)) {
        return Err(CliError::new(Code::Training, "at least one seed failed; see sweep.json"));
    }
    Ok(())
}
