use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Cross-layer KV cache analysis and compression.
///
/// Every subcommand accepts `--config <file.json>` whose keys match the long
/// flag names with underscores; flags given on the command line win.
#[derive(Debug, Parser)]
#[command(name = "xkv", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cache dump with controllable cross-layer alignment.
    Synth(SynthArgs),
    /// Cross-layer cosine and CKA matrices, and energy-rank curves.
    Analyze(AnalyzeArgs),
    /// Compress a dump into an XKV1 file.
    Compress(CompressArgs),
    /// Score compressed caches against the original.
    Eval(EvalArgs),
    /// Merge fidelity reports into one comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// JSON file with default values for this subcommand.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Directory receiving all artifacts and manifest.json.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seq_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_kv_heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shared_rank: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub private_rank: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    /// Weight of the shared component, in [0, 1].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Trailing tokens kept uncompressed.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail_len: Option<usize>,
    /// f32, f16 or bf16.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dtype: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rope_base: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Input KVD dump.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// all, cosine, cka or rank.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    /// key, value or both.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub side: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_fraction: Option<f64>,
    /// Comma-separated group sizes for the rank curve.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_sizes: Option<Vec<usize>>,
}

#[derive(Debug, Args, Serialize)]
pub struct PlanArgs {
    /// xkv, single_svd, slerp or none.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    /// Layers per cross-layer group (xkv only).
    #[arg(short = 'G', long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    /// Key rank per group.
    #[arg(long, conflicts_with = "target_rate")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    /// Value rank per group; defaults to the key rank times --kv-rank-ratio.
    #[arg(long, conflicts_with = "target_rate")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value_rank: Option<usize>,
    /// Pick the largest ranks whose compression rate reaches this value.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_rate: Option<f64>,
    /// Value rank divided by key rank when the value rank is derived (default 1.5).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kv_rank_ratio: Option<f64>,
    /// Interpolation fraction for slerp.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slerp_t: Option<f64>,
    /// First merged layer for slerp; defaults to the middle layer.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slerp_start: Option<usize>,
    /// Context length used for rate accounting instead of the dump's length.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_context: Option<usize>,
    /// Seed for randomized SVD.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub const RANK_KEYS: [&str; 3] = ["rank", "value_rank", "target_rate"];

#[derive(Debug, Args, Serialize)]
pub struct CompressArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Input KVD dump.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub plan: PlanArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Original KVD dump.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// XKV1 files to score (repeatable). Without any, the plan flags are
    /// compressed and scored in memory, with factors kept in f64.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compressed: Option<Vec<PathBuf>>,
    /// Seed for synthetic queries (ignored when the dump carries queries).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_seed: Option<u64>,
    /// Number of trailing query positions.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_heads_per_kv: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub plan: PlanArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// fidelity.json files from eval runs.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<PathBuf>,
}
