//! The `sne` command-line driver.
//!
//! Every subcommand writes a [`RunManifest`] before doing any work. The
//! manifest stores the fully resolved arguments, so `sne replay <manifest>`
//! repeats the run and reproduces its outputs byte for byte (timing fields
//! aside).
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod manifest;

pub use commands::{
    ablation_rows, corruption_seed, default_k, resolve_train_config, synth_cloud, training_clouds,
    AblationRow, ABLATION_VARIANTS,
};
pub use manifest::{RunManifest, ARTIFACT_VERSION};

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::model::{GraphFeatures, Variant};
use crate::training::DensityMode;

/// Exit status for invalid flags or flag combinations.
pub const EXIT_USAGE: u8 = 1;
/// Exit status for unreadable, malformed or inconsistent data.
pub const EXIT_DATA: u8 = 2;
/// Exit status for numerical failures (divergence, degenerate geometry).
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "sne", version, about = "Point-cloud surface normal estimation")]
pub struct Cli {
    /// Worker threads (default: one per core).
    #[arg(long, global = true, env = "SNE_THREADS")]
    pub threads: Option<usize>,
    /// Manifest path (default: next to the command's main output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Sample a synthetic surface, optionally corrupted, to .xyz/.normals.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Estimate normals for a point cloud.
    Estimate(EstimateArgs),
    /// Score predicted normals against ground truth.
    Evaluate(EvaluateArgs),
    /// RMSE table of model variants across corruption settings.
    Ablate(AblateArgs),
    /// Time normal estimation.
    Bench(BenchArgs),
    /// Repeat the run recorded in a manifest.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Estimate(_) => "estimate",
            Command::Evaluate(_) => "evaluate",
            Command::Ablate(_) => "ablate",
            Command::Bench(_) => "bench",
            Command::Replay(_) => "replay",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(crate::training::Shape::NAMES))]
    pub shape: String,
    /// Number of sampled points.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub height: Option<f64>,
    #[arg(long)]
    pub extent: Option<f64>,
    #[arg(long)]
    pub curvature: Option<f64>,
    #[arg(long)]
    pub major_radius: Option<f64>,
    #[arg(long)]
    pub minor_radius: Option<f64>,
    /// Gaussian noise σ as a fraction of the bounding-box diagonal.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = DensityMode::None)]
    pub density: DensityMode,
    /// Patch size the thinned cloud must still support (3× this many points).
    #[arg(long, default_value_t = 128)]
    pub patch_size: usize,
    /// Output prefix; writes `<out>.xyz` and `<out>.normals`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

/// Training hyperparameters and data, shared by `train` and `ablate`.
#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainOptions {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// JSON training config used instead of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training clouds (`.xyz` with a sibling `.normals`). Replaces the
    /// synthetic shapes.
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// Synthetic training shapes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "plane,sphere,cylinder,saddle,torus")]
    pub shapes: Vec<String>,
    /// Points per synthetic shape.
    #[arg(long, default_value_t = 20_000)]
    pub points: usize,
    /// Noise levels each synthetic shape is copied at, equally weighted.
    #[arg(long, value_delimiter = ',', default_value = "0,0.0012,0.006,0.012")]
    pub noise_levels: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patches_per_epoch: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    #[arg(long)]
    pub graph_k: Option<usize>,
    #[arg(long)]
    pub local_k: Option<usize>,
    /// Graph-convolution edge inputs, e.g. `xyz+delta_xyz+f+delta_f`.
    #[arg(long)]
    pub graph_features: Option<GraphFeatures>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub options: TrainOptions,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Output directory: `model.snew` (+ `.json`), `loss.csv`.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pca,
    Jet,
    Model,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EstimateArgs {
    /// `.xyz` point cloud.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    /// Model checkpoint; required for `--method model`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Patch size (default 16 for pca/jet, 128 for model).
    #[arg(long)]
    pub k: Option<usize>,
    /// Jet polynomial order.
    #[arg(long, default_value_t = crate::classical::DEFAULT_JET_ORDER)]
    pub order: usize,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Predicted normals, line-aligned with the cloud.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth normals.
    #[arg(long)]
    pub gt: PathBuf,
    /// The `.xyz` cloud the normals belong to.
    #[arg(long)]
    pub cloud: PathBuf,
    /// JSON report path.
    #[arg(long)]
    pub report: PathBuf,
    /// Also write an error heatmap PLY.
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    /// Method label stored in the report.
    #[arg(long, default_value = "predictions")]
    pub method: String,
    /// Patch size label stored in the report.
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub options: TrainOptions,
    /// Directory holding `<variant>.snew` checkpoints.
    #[arg(long, default_value = "ablation")]
    pub checkpoints: PathBuf,
    /// Train every variant first (overwrites existing checkpoints).
    #[arg(long)]
    pub train_all: bool,
    /// Held-out evaluation shapes.
    #[arg(long, value_delimiter = ',', default_value = "torus,cylinder")]
    pub test_shapes: Vec<String>,
    #[arg(long, default_value_t = 10_000)]
    pub test_points: usize,
    /// Score every n-th point.
    #[arg(long, default_value_t = 10)]
    pub stride: usize,
    /// Table path (default `<checkpoints>/ablation.txt`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    /// `.xyz` cloud to time on; a synthetic shape is used when absent.
    #[arg(long)]
    pub cloud: Option<PathBuf>,
    #[arg(long, default_value = "sphere", value_parser = clap::builder::PossibleValuesParser::new(crate::training::Shape::NAMES))]
    pub shape: String,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "pca")]
    pub methods: Vec<Method>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Patch size for every method (default per method, as in `estimate`).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = crate::classical::DEFAULT_JET_ORDER)]
    pub order: usize,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    /// Also write the CSV table here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    pub manifest_file: PathBuf,
}

/// Failure of a CLI invocation.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Run(#[from] crate::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Run(_) => EXIT_DATA,
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialized; --threads {n} ignored");
        }
    }
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<(), CliError> {
    init_logging(cli.verbose);
    init_threads(cli.threads)?;
    commands::dispatch(&cli.command, cli.manifest.as_deref())
}

/// Parses `args` (program name first), runs, and maps the outcome to an
/// exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
