//! `objdist` command-line runner.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! failures while running a command.

mod commands;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "objdist", version, about = "Per-object distance estimation runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic pinhole dataset (JSONL + PNG images).
    Generate(GenerateArgs),
    /// Train a model and write its checkpoint and training log.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write metrics plus per-object predictions.
    Eval(EvalArgs),
    /// Evaluate at several inference mask ratios.
    MaskSweep(SweepArgs),
    /// Evaluate with randomly perturbed boxes at several IoU floors.
    Perturb(PerturbArgs),
    /// Fit and evaluate the box-geometry regressor.
    Baseline(BaselineArgs),
    /// Render PNG plots from the outputs of earlier commands.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file; defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override applied after the config file (repeatable, last wins).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory, created if absent.
    #[arg(long)]
    pub out: PathBuf,
    /// Root seed; recorded as the `seed` override.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Jsonl,
    Kitti,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Also render a validation split of this many frames.
    #[arg(long, default_value_t = 0)]
    pub val_frames: usize,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Annotation file (JSONL) or KITTI label file/directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Jsonl)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Validation annotations; the training set is reused when omitted.
    #[arg(long)]
    pub val: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ModelSource {
    /// Checkpoint written by `train`.
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Use a stub predictor that returns the ground-truth distance.
    #[arg(long)]
    pub oracle: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub source: ModelSource,
    /// Fraction of tokens dropped per object; defaults to `mask_ratio_eval`.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub source: ModelSource,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.3, 0.5, 0.8])]
    pub ratios: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub source: ModelSource,
    /// IoU floor of the perturbed boxes (repeatable or comma separated).
    #[arg(long = "r", value_delimiter = ',', default_values_t = [1.0, 0.9, 0.7, 0.5])]
    pub r: Vec<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    /// Evaluation annotations; the fitting set is reused when omitted.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Geometry features (comma separated); all of them when omitted.
    #[arg(long, value_delimiter = ',')]
    pub features: Vec<String>,
    #[arg(long, default_value_t = 1e-8)]
    pub ridge: f64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory holding outputs of train, eval, mask-sweep, or perturb.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Annotations used to place objects in the bird's-eye plots.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Jsonl)]
    pub format: Format,
    /// Number of frames to draw bird's-eye plots for.
    #[arg(long, default_value_t = 4)]
    pub frames: usize,
    /// TrueType font for titles and axis labels; system fonts are tried otherwise.
    #[arg(long)]
    pub font: Option<PathBuf>,
}

/// Classifies a failure for the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Failure::Usage(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<objdist::Error> for Failure {
    fn from(e: objdist::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::MaskSweep(a) => commands::mask_sweep(a),
        Command::Perturb(a) => commands::perturb(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
