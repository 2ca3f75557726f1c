//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied arguments violate a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Geometry constraint violated (degenerate or out-of-bounds box).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A prompt contains characters outside the configured alphabet.
    #[error("characters outside alphabet: {0:?}")]
    UnknownChars(Vec<char>),

    /// Font file could not be parsed or lacks a requested glyph.
    #[error("font error: {0}")]
    Font(String),

    /// Configuration file invalid or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint missing, malformed, or incompatible with the run.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A model was used before it was trained.
    #[error("model not trained: {0}")]
    NotTrained(String),

    /// Training aborted (non-finite loss, failed invariant).
    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for an [`Error::InvalidInput`] with a formatted message.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
