use std::io;

use thiserror::Error;

pub type Result<T, E = NtaaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NtaaError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl NtaaError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        NtaaError::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        NtaaError::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        NtaaError::Config(msg.into())
    }

    pub(crate) fn checkpoint(msg: impl Into<String>) -> Self {
        NtaaError::Checkpoint(msg.into())
    }
}
