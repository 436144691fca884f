//! `hyroute`: command-line entry point for the routing pipeline.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "hyroute", version, about = "Train, calibrate, evaluate and serve a small/large model router")]
pub struct Cli {
    /// Seed for every random choice (synthesis, shuffling, subsampling, baselines).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for data-parallel stages; 1 runs sequentially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Suppress summaries on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,

    /// Directory that relative output paths are written under.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted ground truth.
    Synth(SynthArgs),
    /// Export per-query training labels as CSV.
    Labels(LabelsArgs),
    /// Search the relaxation grid for the most spread-out transformed labels.
    FindT(FindTArgs),
    /// Train a router.
    Train(TrainArgs),
    /// Pick a threshold meeting a quality-drop budget and store it in the model.
    Calibrate(CalibrateArgs),
    /// Cost/quality tradeoff report for a trained router.
    Evaluate(EvaluateArgs),
    /// Route every query of a dataset split and write the decisions.
    Route(RouteArgs),
    /// Run the HTTP routing gateway.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PresetArg {
    Separable,
    #[value(alias = "gap-correlated")]
    GapCorrelated,
    #[value(alias = "symmetric-random")]
    SymmetricRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Det,
    Prob,
    Trans,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FeaturizerArg {
    Hashed,
    Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Learned,
    AllSmall,
    AllLarge,
    Random,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub preset: PresetArg,
    #[arg(long)]
    pub n: usize,
    /// Quality samples per model per query.
    #[arg(long, default_value_t = 10)]
    pub samples_per_side: usize,
    #[arg(long, default_value = "synth.jsonl")]
    pub out: PathBuf,
}

/// Dataset input shared by most subcommands.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Quality metric column.
    #[arg(long, default_value = "bart_score")]
    pub metric: String,
}

#[derive(Debug, Args)]
pub struct SchemeArgs {
    #[arg(long, value_enum)]
    pub scheme: SchemeArg,
    /// Fixed relaxation for `trans`; when absent the grid search picks it.
    #[arg(long)]
    pub t: Option<f64>,
    /// Relaxation grid: `auto` or a comma-separated list of values.
    #[arg(long, default_value = "auto")]
    pub t_grid: String,
}

#[derive(Debug, Args)]
pub struct LabelsArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    #[arg(long, default_value = "labels.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FindTArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Relaxation grid: `auto` or a comma-separated list of values.
    #[arg(long, default_value = "auto")]
    pub t_grid: String,
    #[arg(long, default_value = "t_star.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// L2 weight decay.
    #[arg(long, default_value_t = 1e-6)]
    pub l2: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value = "hashed")]
    pub featurizer: FeaturizerArg,
    /// Hashed feature dimension.
    #[arg(long, default_value_t = hyroute_core::router::DEFAULT_HASH_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub ngram_min: usize,
    #[arg(long, default_value_t = 2)]
    pub ngram_max: usize,
    #[arg(long, default_value_t = 0)]
    pub hash_seed: u64,
    /// Keep token case when hashing.
    #[arg(long)]
    pub case_sensitive: bool,
    /// Keep the epoch with the lowest validation-split loss.
    #[arg(long)]
    pub select_checkpoint: bool,
    #[arg(long, default_value = "model.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Largest acceptable quality drop versus all-at-large, in percent.
    #[arg(long)]
    pub max_drop_pct: f64,
    /// Size of the seeded validation subsample.
    #[arg(long, default_value_t = hyroute_core::policy::DEFAULT_CALIBRATION_SAMPLES)]
    pub val_samples: usize,
    #[arg(long, value_enum, default_value = "validation")]
    pub split: SplitArg,
    /// Where to write the updated model; defaults to overwriting `--model`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Score the routing under a different metric than `--metric`.
    #[arg(long)]
    pub eval_metric: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value = "small-vs-large")]
    pub pair_name: String,
    /// Seeds averaged by the random-routing baseline.
    #[arg(long, default_value_t = hyroute_core::evaluation::DEFAULT_RANDOM_SEEDS)]
    pub random_seeds: usize,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Also write the tradeoff curve as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RouteArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "learned")]
    pub policy: PolicyArg,
    /// Explicit threshold; otherwise the model's calibrated one for `--metric`.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value = "bart_score")]
    pub metric: String,
    /// Picks among several calibrations for `--metric`.
    #[arg(long)]
    pub max_drop_pct: Option<f64>,
    /// Share of queries sent to the large model by the random policy.
    #[arg(long)]
    pub p_large: Option<f64>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value = "decisions.jsonl")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Gateway TOML config.
    #[arg(long)]
    pub config: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = if cli.quiet { "warn" } else { "info" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(filter)),
        )
        .with_writer(std::io::stderr)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<commands::UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
