//! `resunet` -- train, predict, evaluate and verify the road-segmentation
//! network.
//!
//! Exit codes: 0 success, 1 verification failure, 2 bad input or
//! configuration, 3 training divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "resunet",
    version,
    about = "Deep residual U-Net for road segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a manifest dataset or generated synthetic scenes.
    Train(TrainArgs),
    /// Segment images with a trained checkpoint using overlapped tiling.
    Predict(PredictArgs),
    /// Compute relaxed precision/recall curves and the break-even point.
    Evaluate(EvaluateArgs),
    /// Run the built-in gradient, shape and parameter-count checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Flat key=value config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest (one `image<TAB>mask` pair per line).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Train on N generated synthetic scenes instead of a manifest.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    width_scale: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    /// Decay the learning rate every this many epochs.
    #[arg(long)]
    lr_decay_every: Option<usize>,
    #[arg(long)]
    samples_per_epoch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Maximum worker threads (1 preserves bit-reproducibility guarantees).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained checkpoint to load.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for probability and mask PNGs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Tile overlap in pixels.
    #[arg(long)]
    overlap: Option<usize>,
    /// Binarization threshold for the mask PNG.
    #[arg(long)]
    threshold: Option<f32>,
    #[arg(long)]
    threads: Option<usize>,
    /// Input images (8-bit PNG).
    #[arg(value_name = "IMAGE", required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest of `prediction<TAB>ground_truth` PNG pairs.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for the curve CSV and summary.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Slack radius in pixels.
    #[arg(long)]
    rho: Option<usize>,
    /// Distance defining "within rho pixels": chebyshev or euclidean.
    #[arg(long)]
    distance: Option<String>,
    /// Comma-separated binarization thresholds (default 0.01..0.99).
    #[arg(long)]
    thresholds: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Corrupt one analytic gradient to prove the harness can fail.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

/// A command failure carrying its exit code.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn bad_input(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(args),
        Command::Predict(args) => commands::predict(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Verify(args) => commands::verify(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            if !failure.message.is_empty() {
                eprintln!("error: {}", failure.message);
            }
            ExitCode::from(failure.code)
        }
    }
}
