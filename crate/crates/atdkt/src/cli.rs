//! Command-line flags.

use std::path::PathBuf;

use atdkt_core::model::{FeedbackMode, Variant};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "atdkt",
    version,
    about = "AT-DKT knowledge tracing: data preparation, training and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expand, chunk and split an interaction CSV.
    Prepare(PrepareArgs),
    /// Train one or all cross-validation folds.
    Train(TrainArgs),
    /// Score the checkpoints of a run.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic interaction CSV with its latent truth.
    Synth(SynthArgs),
    /// Train the four auxiliary-task variants on shared folds.
    Ablate(AblateArgs),
    /// Write knowledge-state trajectories or fused embeddings.
    #[command(subcommand)]
    Export(ExportCommand),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = atdkt_core::data::DEFAULT_MAX_LEN)]
    pub max_len: usize,
    #[arg(long, default_value_t = atdkt_core::data::DEFAULT_MIN_LEN)]
    pub min_len: usize,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Seed of the student-to-fold shuffle.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON overrides of the default run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Train only this fold; all folds by default.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Overrides `model.variant`.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `$ATDKT_RUNS_DIR/<name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run name under the runs root; defaults to `<variant>-seed<seed>`.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, env = "ATDKT_RUNS_DIR", default_value = "runs")]
    pub runs_dir: PathBuf,
    /// Folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Onestep,
    Multistep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Feedback {
    Binarize,
    Probability,
}

impl From<Feedback> for FeedbackMode {
    fn from(f: Feedback) -> Self {
        match f {
            Feedback::Binarize => FeedbackMode::Binarize,
            Feedback::Probability => FeedbackMode::Probability,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value_t = EvalMode::Onestep)]
    pub mode: EvalMode,
    /// Observed fraction for multistep evaluation, one of 0.2, 0.3, ..., 0.9.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long, value_enum, default_value_t = Feedback::Binarize)]
    pub feedback: Feedback,
    /// Evaluate only this fold; every trained fold by default.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Truth file of a synthetic dataset; adds the oracle AUC bound.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Output directory; defaults to a subdirectory of the run.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON overrides of the default generator spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Variant-fold pairs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Subcommand)]
pub enum ExportCommand {
    /// Per-step probabilities of a KC subset along one student's sequence.
    States(StatesArgs),
    /// Fused LSTM inputs of sampled correct and incorrect steps.
    Embeddings(EmbeddingsArgs),
}

#[derive(Debug, Args)]
pub struct StatesArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long)]
    pub student: String,
    #[arg(long, default_value_t = 0)]
    pub chunk: usize,
    /// Comma-separated KC ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub kcs: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct EmbeddingsArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: atdkt_core::Error| e.to_string())
}
