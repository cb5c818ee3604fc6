//! `maneuver-graph`: dataset generation, training, evaluation, ablations,
//! transfer and gradient checking over the `maneuver-core` library.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use maneuver_core::model::ModelError;
use maneuver_core::traffic_sim::SimError;
use maneuver_core::{Behavior, Preset, Runner, Variant};
use thiserror::Error;

mod commands;
pub mod manifest;

pub use manifest::{read_run_log, RunManifest, RUN_LOG};

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "MANEUVER_GRAPH_THREADS";

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVAL_FILE: &str = "eval.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

impl CliError {
    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn json(path: &Path) -> impl FnOnce(serde_json::Error) -> CliError + '_ {
        move |source| CliError::Json { path: path.display().to_string(), source }
    }

    /// 2: bad invocation or config, 3: unreadable or inconsistent files,
    /// 4: failure while running. A failed check (gradcheck) exits with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::Sim(SimError::Config(_))
            | CliError::Model(ModelError::Config(_)) => 2,
            CliError::Io { .. }
            | CliError::Json { .. }
            | CliError::Sim(SimError::Io { .. } | SimError::Dataset(_))
            | CliError::Model(ModelError::Checkpoint(_)) => 3,
            _ => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "maneuver-graph", version, about = "Vehicle maneuver classification on spatio-temporal scene graphs")]
pub struct Cli {
    /// Print the JSON report instead of the text table.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model and write its best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train with 50/75/100% of landmarks.
    AblateLandmarks(AblateLandmarksArgs),
    /// Train every architecture variant on shared data and seeds.
    AblateModel(AblateModelArgs),
    /// Train on one distribution and evaluate the shared classes on others.
    Transfer(TransferArgs),
    /// Compare analytic and finite-difference gradients on a toy sequence.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// World config JSON; defaults to the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "A", conflicts_with = "config")]
    pub preset: Preset,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 600)]
    pub n: usize,
    /// Six class weights (MVA,MTU,PRK,LCL,LCR,OVT); balanced by default.
    #[arg(long, value_delimiter = ',', num_args = 6)]
    pub mix: Option<Vec<f64>>,
}

/// Seeds and epochs shared by the training commands.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
}

impl RunArgs {
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repeats.max(1)).map(|k| self.seed + k).collect()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Model config JSON (partial configs are filled from the variant defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the checkpoint, metrics and run log.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `all`, `transfer` (MVA,MTU,PRK) or a comma list of class abbreviations.
    #[arg(long, default_value = "all")]
    pub classes: String,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    /// Directory for eval.json and the run log; defaults to the checkpoint's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateLandmarksArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value = "G+L+MA")]
    pub variant: Variant,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.75,1.0")]
    pub fractions: Vec<f64>,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateModelArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long = "variant", value_delimiter = ',', default_value = "G+L+MA,G+L+SA,G+L,G+SA,L,L+MA")]
    pub variants: Vec<Variant>,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[arg(long, default_value = "A")]
    pub train_dist: Preset,
    #[arg(long, value_delimiter = ',', default_value = "B,C")]
    pub eval_dists: Vec<Preset>,
    /// Existing dataset to train on instead of generating one from `--train-dist`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Sequences per generated dataset.
    #[arg(long, default_value_t = 600)]
    pub n: usize,
    /// Seed for generated datasets.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value = "G+L+MA")]
    pub variant: Variant,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model config JSON; its `variant` is checked.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Variant to check; all six when neither this nor `--config` is given.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub nodes: usize,
    #[arg(long, default_value_t = 3)]
    pub frames: usize,
}

/// Result of a command: a human table, the machine report, and whether
/// the command's check passed.
#[derive(Clone, Debug)]
pub struct Output {
    pub text: String,
    pub json: serde_json::Value,
    pub success: bool,
}

/// State shared by commands run in one process.
#[derive(Default)]
pub struct Context {
    pub runner: Runner,
}

pub fn run(cli: &Cli) -> Result<Output, CliError> {
    run_with(&Context::default(), cli)
}

pub fn run_with(ctx: &Context, cli: &Cli) -> Result<Output, CliError> {
    match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(ctx, a),
        Command::Eval(a) => commands::eval(a),
        Command::AblateLandmarks(a) => commands::ablate_landmarks(ctx, a),
        Command::AblateModel(a) => commands::ablate_model(ctx, a),
        Command::Transfer(a) => commands::transfer(ctx, a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

/// Parses `--classes`.
pub fn parse_classes(spec: &str) -> Result<Vec<Behavior>, CliError> {
    match spec.trim().to_ascii_lowercase().as_str() {
        "all" => return Ok(Behavior::ALL.to_vec()),
        "transfer" => return Ok(maneuver_core::metrics::TRANSFER_CLASSES.to_vec()),
        _ => {}
    }
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let b: Behavior = part.parse().map_err(CliError::Usage)?;
        if !out.contains(&b) {
            out.push(b);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("--classes selects no class".into()));
    }
    Ok(out)
}

/// Builds the global rayon pool from `MANEUVER_GRAPH_THREADS`, if set.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}
