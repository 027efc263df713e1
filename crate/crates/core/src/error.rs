use thiserror::Error;

pub type Result<T> = std::result::Result<T, XkvError>;

#[derive(Debug, Error)]
pub enum XkvError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rank {rank} exceeds limit {limit}")]
    RankTooLarge { rank: usize, limit: usize },
    #[error("SVD did not converge")]
    NoConvergence,
    #[error("empty spectrum")]
    EmptySpectrum,
    #[error("gram path limited to {cap} rows, got {rows}")]
    GramTooLarge { rows: usize, cap: usize },
    #[error("input has zero variance after centering")]
    ZeroVariance,
    #[error("group size {group_size} does not divide {num_layers} layers")]
    IndivisibleGrouping { num_layers: usize, group_size: usize },
    #[error("ranks (key {key_rank}, value {value_rank}) exceed min(L, G*d) = {limit}")]
    RanksExceedDims { key_rank: usize, value_rank: usize, limit: usize },
    #[error("SVD key compression requires pre-RoPE keys")]
    KeysNotPreRope,
    #[error("target rate {target} unachievable (achievable range up to {max_rate})")]
    Unachievable { target: f64, max_rate: f64 },
    #[error("head_dim {0} is odd")]
    OddHeadDim(usize),
    #[error("head mismatch: {0}")]
    HeadMismatch(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl XkvError {
    /// Stable machine-readable code, used in CLI error output.
    pub fn code(&self) -> &'static str {
        match self {
            XkvError::BadMagic { .. } => "bad_magic",
            XkvError::HeaderMismatch(_) => "header_mismatch",
            XkvError::BadHeader(_) => "bad_header",
            XkvError::NonFinite(_) => "non_finite",
            XkvError::UnsupportedDtype(_) => "unsupported_dtype",
            XkvError::InvalidConfig(_) => "invalid_config",
            XkvError::ShapeMismatch(_) => "shape_mismatch",
            XkvError::RankTooLarge { .. } => "rank_too_large",
            XkvError::NoConvergence => "no_convergence",
            XkvError::EmptySpectrum => "empty_spectrum",
            XkvError::GramTooLarge { .. } => "gram_too_large",
            XkvError::ZeroVariance => "zero_variance",
            XkvError::IndivisibleGrouping { .. } => "indivisible_grouping",
            XkvError::RanksExceedDims { .. } => "ranks_exceed_dims",
            XkvError::KeysNotPreRope => "keys_not_pre_rope",
            XkvError::Unachievable { .. } => "unachievable",
            XkvError::OddHeadDim(_) => "odd_head_dim",
            XkvError::HeadMismatch(_) => "head_mismatch",
            XkvError::InvalidPlan(_) => "invalid_plan",
            XkvError::Io(_) => "io_failure",
            XkvError::Json(_) => "json",
        }
    }
}
