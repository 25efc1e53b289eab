use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Instrumented GPT-2 forward passes, logit-lens analyses and flow graphs.
#[derive(Debug, Parser)]
#[command(name = "lensflow", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// Checkpoint directory (config.json, model.safetensors, vocab.json, merges.txt).
    #[arg(long, global = true, env = "LENSFLOW_MODEL")]
    pub model: Option<PathBuf>,
    /// TOML file with defaults; flags and environment variables win over it.
    #[arg(long, global = true, env = "LENSFLOW_CONFIG")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Model summary and weight validation.
    Info,
    /// Run one forward pass and summarise it.
    Trace(TraceArgs),
    /// Build the flow graph of one prompt.
    Graph(GraphArgs),
    /// Semantic-alignment experiment over a prompt corpus.
    Experiment(ExperimentArgs),
    /// Probability shift caused by one layer norm.
    LnReport(LnReportArgs),
    /// Detect late-layer regularization neurons.
    RegNeurons(RegNeuronArgs),
    /// Serve the HTTP API (and the viewer, if a static directory is set).
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub prompt: String,
    /// Write one safetensors file per layer into this directory.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Position to analyse; defaults to the last token.
    #[arg(long)]
    pub position: Option<usize>,
    /// Number of next-token candidates to print.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub keep_kv: Option<usize>,
    #[arg(long)]
    pub keep_wo: Option<usize>,
    #[arg(long)]
    pub keep_mlp: Option<usize>,
    /// Tokens listed per node label.
    #[arg(long)]
    pub label_tokens: Option<usize>,
    #[arg(long)]
    pub merge_qk: bool,
    #[arg(long)]
    pub naive_qk: bool,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[arg(long)]
    pub prompt: String,
    /// Layer range `A..B` (end exclusive) or a single layer.
    #[arg(long)]
    pub layers: Option<String>,
    /// Target token, for example " Tokyo"; must be a single token.
    #[arg(long, allow_hyphen_values = true)]
    pub target: Option<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub prune: PruneArgs,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// JSONL corpus, or `bundled` for the built-in 100 prompts.
    #[arg(long, env = "LENSFLOW_CORPUS")]
    pub corpus: Option<String>,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    /// Keep only prompts the model completes correctly.
    #[arg(long)]
    pub filter_correct: bool,
    #[arg(long, default_value_t = 3)]
    pub top_heads: usize,
    #[arg(long, default_value_t = 3)]
    pub top_values: usize,
    /// Directory for report.json and report.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LnReportArgs {
    #[arg(long)]
    pub layer: usize,
    /// Which layer norm of the block: 1 (before attention) or 2 (before the MLP).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub ln: u8,
    #[arg(long, env = "LENSFLOW_CORPUS")]
    pub corpus: Option<String>,
    /// Project without the final layer norm (diagnostic).
    #[arg(long)]
    pub no_final_ln: bool,
    /// Project the corpus-mean vectors instead of averaging deltas.
    #[arg(long)]
    pub mean_vector: bool,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

#[derive(Debug, Args)]
pub struct RegNeuronArgs {
    /// Minimum fraction of prompts a neuron must be in the top pool for.
    #[arg(long, default_value_t = 0.85)]
    pub threshold: f64,
    /// Size of the per-prompt pool of most activated neurons.
    #[arg(long, default_value_t = 100)]
    pub pool: usize,
    /// Layer range `A..B`; all layers when absent.
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long, env = "LENSFLOW_CORPUS")]
    pub corpus: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "LENSFLOW_PORT")]
    pub port: Option<u16>,
    #[arg(long, env = "LENSFLOW_HOST")]
    pub host: Option<String>,
    /// Directory with the viewer's static assets.
    #[arg(long, env = "LENSFLOW_STATIC_DIR")]
    pub static_dir: Option<PathBuf>,
}
