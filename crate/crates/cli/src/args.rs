use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use sparsedec_core::attention::GroupAggregation;
use sparsedec_core::DecodeMode;

#[derive(Debug, Parser)]
#[command(name = "sparsedec", version, about = "Sparse-attention decoding experiments on a desk-scale transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Greedy generation under a decoding mode; writes a JSON run report.
    Decode(DecodeArgs),
    /// Teacher-forced cross-entropy over a token file.
    EvalPpl(EvalPplArgs),
    /// Selection-level needle retrieval for each selection policy.
    Needle(NeedleArgs),
    /// Top-k traces, overlap matrix, recall curve and heatmap CSVs.
    Analyze(AnalyzeArgs),
    /// Kernel timings and token-load counts at a given context length.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    Tidal,
    #[value(name = "perlayer_topk", alias = "perlayer")]
    PerlayerTopk,
    #[value(name = "page_estimate", alias = "page")]
    PageEstimate,
    Window,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => DecodeMode::Full,
            ModeArg::Tidal => DecodeMode::Tidal,
            ModeArg::PerlayerTopk => DecodeMode::PerlayerTopk,
            ModeArg::PageEstimate => DecodeMode::PageEstimate,
            ModeArg::Window => DecodeMode::Window,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationArg {
    Sum,
    Max,
}

impl From<AggregationArg> for GroupAggregation {
    fn from(a: AggregationArg) -> Self {
        match a {
            AggregationArg::Sum => GroupAggregation::Sum,
            AggregationArg::Max => GroupAggregation::Max,
        }
    }
}

#[derive(Debug, Clone, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["weights", "synth_seed", "zero_weights"])))]
pub struct ModelArgs {
    /// TDW1 weight file.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Generate synthetic weights from this seed.
    #[arg(long)]
    pub synth_seed: Option<u64>,
    /// All-zero weights (uniform next-token distribution).
    #[arg(long)]
    pub zero_weights: bool,
    #[arg(long, default_value_t = 8)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub kv_heads: usize,
    #[arg(long, default_value_t = 16)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub ff: usize,
    #[arg(long, default_value_t = 128)]
    pub vocab: usize,
}

#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Tidal)]
    pub mode: ModeArg,
    /// Token budget m.
    #[arg(long, default_value_t = 16)]
    pub budget: usize,
    /// Re-selection layer (default depends on the layer count).
    #[arg(long)]
    pub reselect: Option<usize>,
    /// Cache correction period in steps; 0 disables correction.
    #[arg(long, default_value_t = 0)]
    pub correction_period: usize,
    #[arg(long, default_value_t = 16)]
    pub page_size: usize,
    #[arg(long, default_value_t = 4)]
    pub sinks: usize,
    /// Recent-window length for window mode (default: budget - sinks).
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, value_enum, default_value_t = AggregationArg::Sum)]
    pub aggregation: AggregationArg,
    /// Also attend to the token being decoded in sparse layers.
    #[arg(long)]
    pub include_current: bool,
}

#[derive(Debug, Clone, Args)]
pub struct PromptArgs {
    /// Token file: one decimal id per line.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Length of the synthetic prompt when no file is given.
    #[arg(long, default_value_t = 64)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 1)]
    pub prompt_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    /// Also run full attention and report the fraction of matching tokens.
    #[arg(long)]
    pub compare_full: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write a heatmap CSV of exact top-`budget` sets (KV head 0).
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalPplArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Token file: one decimal id per line.
    #[arg(long)]
    pub tokens: PathBuf,
    /// Tokens consumed before the first scored prediction.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct NeedleArgs {
    /// Number of cached tokens (filler plus needle).
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 16)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 16)]
    pub budget: usize,
    #[arg(long, default_value_t = 16)]
    pub page_size: usize,
    #[arg(long, default_value_t = 4)]
    pub sinks: usize,
    #[arg(long, default_value_t = 64)]
    pub window: usize,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub prompt: PromptArgs,
    /// Size of the traced top-k sets.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 4)]
    pub steps: usize,
    /// First selection layer the recall sweep starts from.
    #[arg(long, default_value_t = 2)]
    pub base: usize,
    /// KV head exported in the heatmap.
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Simulated cache length.
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 512)]
    pub budget: usize,
    #[arg(long, default_value_t = 64)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 5)]
    pub iters: usize,
    /// Depth used for the schedule-level load ratio.
    #[arg(long, default_value_t = 32)]
    pub layers: usize,
    #[arg(long)]
    pub reselect: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub page_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
