use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed chain at token {position}: {reason}")]
    MalformedChain { position: usize, reason: String },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("task {kind} unsupported for scene: {reason}")]
    UnsupportedTask { kind: String, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite cost at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("missing prediction for queried expert {0}")]
    MissingPrediction(String),

    #[error("empty path set")]
    EmptyPathSet,

    #[error("context overflow: {len} tokens exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("query budget exceeded: plan needs {needed} queries, limit is {limit}")]
    QueryBudgetExceeded { needed: usize, limit: usize },

    #[error("unknown token {0:?}")]
    UnknownToken(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data schema mismatch: {0}")]
    DataSchemaMismatch(String),

    #[error("stage 2 requires a stage-1 checkpoint (pass the skip-stage1 override for the ablation)")]
    MissingStage1Init,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
