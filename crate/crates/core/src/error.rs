use thiserror::Error;

use crate::allocation::MarketDesign;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("design {0} has no coalition value; its marginal contributions are direct")]
    UnsupportedDesign(MarketDesign),

    #[error("{players} support features exceed the exact enumeration cap of {cap}")]
    Capacity { players: usize, cap: usize },

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("out-of-order clearing: expected t={expected}, got t={got}")]
    Sequencing { expected: usize, got: usize },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
