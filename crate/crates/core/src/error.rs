use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// Bad magic bytes, unsupported version or otherwise unparseable header.
    #[error("format error: {0}")]
    Format(String),

    /// Truncated payload or trailing garbage.
    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// Referenced ids that do not exist in the feature tables.
    #[error("referential integrity error: missing {kind} ids: {}", .missing.join(", "))]
    Integrity {
        kind: &'static str,
        missing: Vec<String>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: loss={loss}")]
    Diverged { epoch: usize, loss: f64 },

    /// Checkpoint does not match the data or the requested architecture.
    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
