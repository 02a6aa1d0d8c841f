use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pkpd_core::diffcore::{PenaltyMode, PenaltyScope};
use pkpd_core::models::ModelKind;

#[derive(Debug, Parser)]
#[command(name = "pkpd", version, about = "Mechanistic state space models for disease progression")]
#[command(args_conflicts_with_subcommands = true, allow_negative_numbers = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort.
    GenData(GenDataArgs),
    /// Train a model, optionally selecting hyperparameters by cross-validation.
    Train(TrainArgs),
    /// Score a trained model on a cohort.
    Evaluate(EvaluateArgs),
    /// Conditional forecasts from a trained model.
    Forecast(ForecastArgs),
    /// Cross-validated comparison of the nested mechanism variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON file with settings for this subcommand; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Progress on stderr; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of patients.
    #[arg(long)]
    pub n: Option<usize>,
    /// Maximum sequence length.
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Also write the per-patient ground truth.
    #[arg(long)]
    pub truth: bool,
}

#[derive(Debug, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Width of the inference network's recurrent state.
    #[arg(long)]
    pub inference_hidden: Option<usize>,
    #[arg(long)]
    pub penalty: Option<PenaltyMode>,
    /// `all` or `exclude-attention`.
    #[arg(long)]
    pub scope: Option<PenaltyScope>,
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Start from the kind's preset settings instead of the defaults.
    #[arg(long)]
    pub preset: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training cohort (NDJSON).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Cross-validated grid search; the full grid unless a grid JSON is given.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    pub grid: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Parallel grid jobs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory of the model to score.
    #[arg(long)]
    pub weights: PathBuf,
    /// Checkpoint of a second model for pairwise comparison.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Importance samples per patient; 0 skips the estimate.
    #[arg(long)]
    pub is_samples: Option<usize>,
    /// Posterior samples averaged in the bound.
    #[arg(long)]
    pub elbo_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ForecastArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    /// Conditioning steps; with --F replaces the presets.
    #[arg(long = "C", requires = "f")]
    pub c: Option<usize>,
    /// Forecast steps.
    #[arg(long = "F", requires = "c")]
    pub f: Option<usize>,
    #[arg(long)]
    pub rollouts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}
