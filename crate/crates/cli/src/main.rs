//! `parkdiff`: scene generation, training, prediction, evaluation,
//! ablations and plots.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Errors split by exit code: 1 for configuration, 2 for runtime.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl From<parkdiffusion::Error> for CliError {
    fn from(e: parkdiffusion::Error) -> Self {
        match e {
            parkdiffusion::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "parkdiff", version, about = "Multi-agent trajectory prediction for parking lots", after_long_help = config::FIELD_HELP)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the configuration file.
    #[arg(long, global = true, env = "PARKDIFF_SEED")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory receiving every output and a manifest.
    #[arg(long, global = true, default_value = "run")]
    pub run_dir: PathBuf,
    /// Floating-point type used for training and inference.
    #[arg(long, global = true, value_enum, default_value = "f64")]
    pub precision: Precision,
    /// Feature width d.
    #[arg(long, global = true)]
    pub d: Option<usize>,
    /// Candidates per agent K.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Reverse steps at inference.
    #[arg(long, global = true)]
    pub tau: Option<usize>,
    /// Weight of the probability loss.
    #[arg(long, global = true)]
    pub lambda_ce: Option<f64>,
    /// Per-timestep loss weights.
    #[arg(long, global = true, value_enum)]
    pub weights: Option<WeightsArg>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Stage-1 iterations.
    #[arg(long, global = true)]
    pub denoiser_iterations: Option<usize>,
    /// Stage-2 iterations.
    #[arg(long, global = true)]
    pub initializer_iterations: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum WeightsArg {
    Uniform,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationKind {
    /// Randomly drop 0, 25, 50, 75 and 100% of the map polylines.
    Mask,
    /// Metrics per agent-count bucket.
    Buckets,
    /// Retrain without map, type modulation or kinematics.
    Components,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic parking-lot scenes.
    Synth {
        /// Number of scenes (overrides synth.scenes).
        #[arg(long)]
        scenes: Option<usize>,
        /// Output file name inside the run directory.
        #[arg(long, default_value = "scenes.jsonl")]
        out: String,
    },
    /// Train stage 1, stage 2 or both.
    Train {
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
        /// Scene file used for training.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to continue from (required for stage 2 alone).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Write candidate sets for every sample of a scene file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Metrics of a checkpoint, the EKF baseline or the ground-truth oracle.
    Eval {
        /// Checkpoint path, or "ekf".
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<String>,
        #[arg(long)]
        data: PathBuf,
        /// Score the ground truth itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Ablation tables.
    Ablate {
        #[arg(long, value_enum)]
        kind: AblationKind,
        /// Checkpoint (mask, buckets).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation scenes.
        #[arg(long)]
        data: PathBuf,
        /// Training scenes (components).
        #[arg(long)]
        train_data: Option<PathBuf>,
    },
    /// SVG overlay of one sample.
    Plot {
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(match e {
                CliError::Config(_) => 1,
                CliError::Runtime(_) => 2,
            })
        }
    }
}
