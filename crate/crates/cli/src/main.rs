//! `neuralizer`: train, evaluate and run the context-conditioned network.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neuralizer::datagen::TaskKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] neuralizer::Error),
}

impl From<neuralizer::tensor::TensorError> for CliError {
    fn from(e: neuralizer::tensor::TensorError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 2 for bad input of any kind, 3 for divergence, 1 for anything else.
    pub fn exit_code(&self) -> u8 {
        use neuralizer::tensor::TensorError;
        use neuralizer::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::Diverged { .. } => 3,
                E::Config(_) | E::Checkpoint(_) | E::Io(_) | E::Json(_) => 2,
                E::Tensor(TensorError::Format(_) | TensorError::Io(_)) => 2,
                _ => 1,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "neuralizer", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a Neuralizer, or a task-specific baseline with --baseline.
    Train(TrainArgs),
    /// Evaluate checkpoints on the configured tasks and write a CSV report.
    Eval(EvalArgs),
    /// Predict one image from NTF1 input and context files.
    Infer(InferArgs),
    /// Write PGM montages of generated episodes and their augmented variants.
    Preview(PreviewArgs),
    /// Print parameter counts and inference FLOPs.
    Params(ParamsArgs),
}

#[derive(Debug, Args)]
struct PinArgs {
    /// Baseline segmentation classes, comma separated.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<u8>>,
    /// Baseline input modalities, comma separated.
    #[arg(long, value_delimiter = ',')]
    modalities: Option<Vec<usize>>,
    /// Baseline target modality for modality transfer.
    #[arg(long)]
    target_modality: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Train a baseline for TASK on N training subjects.
    #[arg(long, num_args = 2, value_names = ["TASK", "N"])]
    baseline: Option<Vec<String>>,
    #[command(flatten)]
    pins: PinArgs,
    /// Exclude items from training: task:<kind>, modality:<id> or class:<id>, comma separated.
    #[arg(long)]
    holdout: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Override train.steps_max.
    #[arg(long)]
    steps: Option<usize>,
    /// Override paths.run_dir.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Continue from last.nlz in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoints to evaluate. Baseline checkpoints of one task are pooled by training-set size.
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    /// Treat the two checkpoints as seen and held-out models and report their gap.
    #[arg(long)]
    compare: bool,
    /// Override eval.bootstrap.
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Override paths.eval_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InferArgs {
    checkpoint: PathBuf,
    /// `[3, H, W]` NTF1 input image.
    #[arg(long)]
    input: PathBuf,
    /// `[4, H, W]` NTF1 context pairs (input channels then target).
    #[arg(long, num_args = 0..)]
    context: Vec<PathBuf>,
    /// Task kind, which decides whether the output is thresholded.
    #[arg(long)]
    task: TaskKind,
    /// Bootstrap replicates; 0 for a single pass.
    #[arg(long, default_value_t = 0)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2.0)]
    jitter_deg: f64,
    #[arg(long, default_value_t = 2.0)]
    jitter_px: f64,
    /// Output NTF1 path; a PGM preview is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task kind to preview; every kind when omitted.
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    context_size: usize,
    /// Augmented variants per task.
    #[arg(long, default_value_t = 3)]
    variants: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the published model width and image size instead of the config's.
    #[arg(long)]
    paper: bool,
    #[arg(long, default_value_t = 1)]
    context_size: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer_cmd(a),
        Command::Preview(a) => commands::preview(a),
        Command::Params(a) => commands::params(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
