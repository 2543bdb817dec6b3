mod commands;
mod config;
mod data;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "nicetrans", version, about = "Joint affine and deformable 3D image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic labelled image pairs and a manifest.
    Synth(SynthArgs),
    /// Train a model and write checkpoints, a loss log and the resolved config.
    Train(TrainArgs),
    /// Register one image pair with a trained checkpoint.
    Register(RegisterArgs),
    /// Score a checkpoint on a labelled dataset.
    Evaluate(EvaluateArgs),
    /// Train once per value of one hyper-parameter and tabulate the results.
    Sweep(SweepArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Volume shape as D,H,W.
    #[arg(long, default_value = "48,48,48")]
    pub shape: String,
    /// Largest rotation about each axis, in degrees.
    #[arg(long, default_value_t = 5.0)]
    pub max_rotation: f64,
    /// Translation length, in voxels.
    #[arg(long, default_value_t = 3.0)]
    pub max_translation: f64,
    /// Largest per-axis scale deviation from 1.
    #[arg(long, default_value_t = 0.0)]
    pub max_scale: f64,
    /// Peak magnitude of the smooth deformation, in voxels.
    #[arg(long, default_value_t = 3.0)]
    pub deform_amp: f64,
    /// Smoothing scale of the deformation, in voxels.
    #[arg(long, default_value_t = 6.0)]
    pub smoothness: f64,
}

/// Overrides shared by `train` and `sweep`.
#[derive(Args)]
pub struct RunArgs {
    /// TOML run config; defaults are used for anything missing.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training data directory (overrides `data.dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Train and use only the affine stages.
    #[arg(long)]
    pub affine_only: bool,
    /// Use a model without affine stages (same depth).
    #[arg(long)]
    pub no_affine: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the affine-stage field instead of the final one.
    #[arg(long)]
    pub affine_only: bool,
    /// Skip intensity normalisation, crop/pad and center-of-mass alignment.
    #[arg(long)]
    pub no_preprocess: bool,
    /// Crop/pad both images to D,H,W (defaults to the fixed shape).
    #[arg(long)]
    pub shape: Option<String>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory with a manifest of labelled pairs.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub affine_only: bool,
    #[arg(long)]
    pub no_preprocess: bool,
    #[arg(long)]
    pub shape: Option<String>,
    /// Row label in the summary table (defaults to the checkpoint name).
    #[arg(long)]
    pub group: Option<String>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// steps, lambda or variant.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values, e.g. `0:3,1:4`, `0,1e-4` or
    /// `baseline,trans_all`. Defaults to the full published grid.
    #[arg(long)]
    pub values: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Register(a) => commands::register(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Sweep(a) => commands::sweep(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
