use std::io;

use thiserror::Error;

/// Errors raised by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate statistics: {0}")]
    DegenerateStats(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
