use std::io;

/// Crate-wide result type.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the pipeline, grouped by how callers should react.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad parameter values, unsupported combinations).
    #[error("configuration error: {0}")]
    Config(String),

    /// Data violates a documented invariant (shape mismatch, border rule, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A file is not in the expected binary format.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure, including truncated payloads.
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// Training diverged or gradients became non-finite.
    #[error("training error: {0}")]
    Training(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn training(msg: impl Into<String>) -> Self {
        Error::Training(msg.into())
    }
}
