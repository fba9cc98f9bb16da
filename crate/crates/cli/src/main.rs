mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "progrow", version, about = "Depth-progressive training of image classifiers")]
struct Cli {
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: PathBuf,
    /// Override a config field, e.g. `--set optimizer.lr=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Args, Clone)]
pub struct BackboneArgs {
    /// Preset name, e.g. resnet18, vit-b16, tiny-resnet.
    #[arg(short, long)]
    pub backbone: progrow::Preset,
    /// Number of output classes.
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 1)]
    pub width_divisor: usize,
    /// Square input side; defaults to the preset's native size.
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run entire-model, progressive or paired training from a config file.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; overrides `output_dir`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Continue a progressive run from a stage checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split of the configured dataset.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Write the metrics report as JSON here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print the balanced stage partition of a backbone.
    Partition {
        #[command(flatten)]
        backbone: BackboneArgs,
        /// Number of stages.
        #[arg(short)]
        k: usize,
        /// Print JSON only.
        #[arg(long)]
        json: bool,
    },
    /// Print per-stage cost and overall computation of a schedule.
    ComputeReport {
        #[command(flatten)]
        backbone: BackboneArgs,
        /// Stage epochs, e.g. `50,350`.
        #[arg(short, long, value_delimiter = ',', required = true)]
        epochs: Vec<usize>,
        /// Explicit stage sizes; balanced when omitted.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Head used at the last stage.
        #[arg(long, default_value = "final", value_parser = ["final", "progressive"])]
        final_head: String,
        #[arg(long)]
        json: bool,
    },
    /// Train one config over several seeds, each in its own process, and summarize.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Train { config, out, resume } => commands::train(&config, out, resume),
        Command::Eval { config, checkpoint, split, out } => commands::eval(&config, &checkpoint, &split, out),
        Command::Partition { backbone, k, json } => commands::partition(&backbone, k, json),
        Command::ComputeReport { backbone, epochs, sizes, final_head, json } => {
            commands::compute_report(&backbone, &epochs, sizes, &final_head, json)
        }
        Command::Sweep { config, seeds, out } => commands::sweep(&config, &seeds, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
