//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dlm", version, about = "Discrete diffusion training, distillation, sampling and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser on a corpus or an explicit toy distribution.
    TrainTeacher(TrainArgs),
    /// Distill a few-step generator from a trained denoiser.
    Distill(DistillArgs),
    /// Generate sequences from a checkpoint or from the exact toy denoiser.
    Sample(SampleArgs),
    /// Score a samples file.
    Eval(EvalArgs),
    /// Check the inverse-loss bound against exact KL on enumerable instances.
    OracleCheck(OracleArgs),
}

/// Clean data: exactly one of a toy spec or a corpus.
#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// JSON toy distribution `{"n_tokens", "length", "probs"}`.
    #[arg(long, conflicts_with = "corpus")]
    pub toy: Option<PathBuf>,
    /// Text file; non-empty lines become documents.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Corpus tokenizer: `char` or `byte`.
    #[arg(long, default_value = "char")]
    pub mode: String,
    /// Window length for corpus data.
    #[arg(long)]
    pub length: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ProcessArgs {
    /// `absorbing` or `uniform`.
    #[arg(long, default_value = "absorbing")]
    pub process: String,
    /// `log-linear` or `linear-alpha`.
    #[arg(long, default_value = "log-linear")]
    pub schedule: String,
    #[arg(long, default_value_t = 1e-3)]
    pub schedule_eps: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Drop the time embedding.
    #[arg(long)]
    pub no_time_conditioning: bool,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

#[derive(Debug, Clone, Args)]
pub struct LossArgs {
    /// Time draws per sequence.
    #[arg(long, default_value_t = 1)]
    pub n_time_samples: usize,
    /// Softmax temperature of relaxed inputs.
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    /// Keep the model-free score-entropy term.
    #[arg(long)]
    pub include_constant: bool,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Metrics CSV path.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Record wall time per row (makes metrics non-reproducible).
    #[arg(long)]
    pub wall_time: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub process: ProcessArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub loss_opts: LossArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// `sedd`, `mdlm`, `udlm` or `duo`.
    #[arg(long, default_value = "mdlm")]
    pub loss: String,
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: u64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.999)]
    pub ema_decay: f64,
    /// Save the EMA shadow instead of the live weights.
    #[arg(long)]
    pub save_ema: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub teacher: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub loss_opts: LossArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Defaults to the loss matching the teacher's output head.
    #[arg(long)]
    pub loss: Option<String>,
    /// Total distillation steps.
    #[arg(long, default_value_t = 1000)]
    pub steps: u64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub fake_lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub student_lr: f64,
    #[arg(long, default_value_t = 100)]
    pub warmup: u64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.999)]
    pub ema_decay: f64,
    /// Fake updates per student update.
    #[arg(long, default_value_t = 1)]
    pub fake_updates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Student checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Save the student's EMA shadow instead of its live weights.
    #[arg(long)]
    pub save_ema: bool,
    /// Resumable state file.
    #[arg(long)]
    pub state: Option<PathBuf>,
    /// Continue from `--state` instead of starting over.
    #[arg(long, requires = "state")]
    pub resume: bool,
    /// Write the state every this many steps (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    #[arg(long, default_value_t = 1)]
    pub log_every: u64,
    /// Toy mode: exact KL of the student sampler every this many steps (0: at the end only).
    #[arg(long, default_value_t = 0)]
    pub eval_every: u64,
    /// Sampler steps for the exact KL.
    #[arg(long, default_value_t = 4)]
    pub eval_steps: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long, required_unless_present = "oracle_toy")]
    pub checkpoint: Option<PathBuf>,
    /// Sample with the exact denoiser of this toy spec instead of a network.
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle_toy: Option<PathBuf>,
    #[command(flatten)]
    pub process: ProcessArgs,
    /// Defaults to the ancestral sampler of the process.
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub samples: PathBuf,
    /// Reference model for NLL; with `--toy`, also the model whose sampler is scored exactly.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub toy: Option<PathBuf>,
    #[arg(long)]
    pub sampler: Option<String>,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    /// Time draws per sequence for the NLL bound.
    #[arg(long, default_value_t = 16)]
    pub nll_draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    /// Reference distribution; random Dirichlet draws when absent.
    #[arg(long)]
    pub toy: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub n_tokens: usize,
    #[arg(long, default_value_t = 2)]
    pub length: usize,
    #[arg(long, default_value = "absorbing")]
    pub process: String,
    /// Schedule floor; the bound is tight only at 0.
    #[arg(long, default_value_t = 0.0)]
    pub schedule_eps: f64,
    #[arg(long, default_value = "mdlm")]
    pub loss: String,
    /// Random model distributions checked against the reference.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 32)]
    pub quad_order: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report CSV path.
    #[arg(long)]
    pub out: PathBuf,
}
