use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("mining error for anchor {anchor}: {message}")]
    Mining { anchor: u32, message: String },

    #[error("invalid scene spec: {0}")]
    Spec(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Validation-class errors (bad arguments, config, preconditions) as
    /// opposed to runtime or file-format failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Usage(_) | Error::Config(_) | Error::Spec(_) | Error::Dimension(_) | Error::Index(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
