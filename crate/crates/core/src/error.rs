use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Caller broke an API contract (wrong argument, inconsistent sizes).
    #[error("usage error: {0}")]
    Usage(String),

    /// A configuration value violates a documented constraint.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data (scene files, detection dumps, checkpoints).
    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
