use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {lhs:?} vs {rhs:?} ({context})")]
    ShapeMismatch {
        lhs: Vec<usize>,
        rhs: Vec<usize>,
        context: &'static str,
    },

    #[error("query row {row} has no allowed keys")]
    EmptyMaskRow { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coordinate out of range: {0}")]
    OutOfRange(String),

    #[error("simplex pool exhausted: {agents} agents but only {pool} vertices")]
    PoolExhausted { agents: usize, pool: usize },

    #[error("out-of-order block: expected {expected}, got {got}")]
    OutOfOrderBlock { expected: usize, got: usize },

    #[error("malformed tensor dump: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
