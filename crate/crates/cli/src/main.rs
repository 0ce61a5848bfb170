//! `usst`: generate data, repair depth, train, evaluate and forecast.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "usst", version, about = "Uncertainty-aware 3D hand trajectory forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic egocentric trajectory dataset.
    Gen(GenArgs),
    /// Fill invalid depths with the least-squares depth model.
    Repair(RepairArgs),
    /// Train a model and write a checkpoint and loss curve.
    Train(TrainArgs),
    /// Compute ADE/FDE metrics on dataset splits.
    Eval(EvalArgs),
    /// Forecast single clips and print them as JSON.
    Forecast(ForecastArgs),
    /// Compare analytic gradients of the full objective with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overridden by USST_OUTPUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RepairArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory to repair.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Report CSV path (default: <out>/repair_report.csv).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Total number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// `fixed:RATIO` or `random:LO:HI`.
    #[arg(long)]
    observation: Option<String>,
    /// Continue from the checkpoint and optimizer state in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    /// Constant-velocity extrapolation.
    Cv,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path without extension (default: <out>/model).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated splits.
    #[arg(long, default_value = "test_seen,test_unseen")]
    split: String,
    /// `0.1..0.9`, `lo..hi:step` or a comma list.
    #[arg(long, default_value = "0.6")]
    ratios: String,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Write observed, ground-truth and predicted points per clip as JSON.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Clip ids; defaults to the test_seen split.
    #[arg(long = "id")]
    ids: Vec<String>,
    #[arg(long, default_value_t = 0.6)]
    ratio: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Tiny,
    Desk,
    Full,
}

#[derive(Args)]
struct GradcheckArgs {
    /// JSON run configuration whose model section is checked.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tiny")]
    preset: Preset,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    horizon: usize,
    #[arg(long, default_value_t = 5)]
    observed: usize,
    /// Probe at most this many entries per tensor.
    #[arg(long)]
    max_probes: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Repair(a) => commands::repair(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Forecast(a) => commands::forecast(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
