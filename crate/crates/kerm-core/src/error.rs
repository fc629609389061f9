//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or dimensions do not line up (rejected input).
    #[error("dimension mismatch: {0}")]
    Dim(String),
    /// An argument is outside its documented domain (rejected input).
    #[error("invalid input: {0}")]
    Invalid(String),
    /// A configuration value is unusable (heads not dividing the model
    /// dimension, unsupported crop count, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// A persisted artifact does not match its binary/JSON format.
    #[error("format error: {0}")]
    Format(String),
    /// Training produced a non-finite loss.
    #[error("training diverged: {0}")]
    Diverged(String),
    /// An action was attempted that the current map state does not allow.
    #[error("illegal action: {0}")]
    IllegalAction(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
