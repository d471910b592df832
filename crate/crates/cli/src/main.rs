//! `beamcast` — dataset generation, training, evaluation, and sweeps for the
//! multimodal beam predictor.
//!
//! Exit codes are a stable scripting contract: 0 success, 2 validation or
//! user error, 3 runtime numerical failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "beamcast", version, about = "Multimodal beam prediction on a synthetic air-to-ground scene")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint: Top-K table and confusion matrix.
    Eval(EvalArgs),
    /// Train one arm per learning rate and write a comparison table.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    samples: usize,
    /// Generation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Square image size in pixels.
    #[arg(long)]
    image_size: Option<usize>,
    /// Codebook size Q.
    #[arg(long)]
    num_beams: Option<usize>,
    /// ULA element count M.
    #[arg(long)]
    num_antennas: Option<usize>,
    /// Optional run-config TOML supplying scene/camera/radio settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overwrite an existing non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from `gen-data`.
    #[arg(long)]
    data: PathBuf,
    /// Run-config TOML (model + train sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the train seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint; epoch numbering resumes after it.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated K values, e.g. `1,3,5`.
    #[arg(long, default_value = "1,3,5")]
    topk: String,
    /// Where to write the confusion-matrix CSV.
    #[arg(long)]
    confusion_out: Option<PathBuf>,
    /// Which samples to score: the checkpoint's own train/test split, or all.
    #[arg(long, default_value = "all", value_parser = ["all", "train", "test"])]
    split: String,
}

#[derive(Args)]
struct SweepArgs {
    /// Comma-separated learning rates, e.g. `1e-3,1e-4,1e-5`.
    #[arg(long)]
    lrs: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Sweep(args) => commands::sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 3 })
        }
    }
}
