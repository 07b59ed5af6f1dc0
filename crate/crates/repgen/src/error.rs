//! Error type shared across the pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus source")]
    EmptyCorpusSource,

    #[error("empty text")]
    EmptyText,

    #[error("unembeddable image record: {0}")]
    UnembeddableImage(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("k must be positive")]
    InvalidK,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid lexicon: {0}")]
    InvalidLexicon(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("vocabulary hash mismatch: checkpoint has {found}, expected {expected}")]
    VocabHashMismatch { expected: String, found: String },

    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss { step: usize, component: &'static str },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
