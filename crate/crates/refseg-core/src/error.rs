//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("empty token sequence")]
    EmptyTokens,

    #[error("token id {id} out of vocabulary range (size {vocab_size})")]
    TokenOutOfRange { id: usize, vocab_size: usize },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("invalid query batch: {0}")]
    InvalidQueryBatch(String),

    #[error("dataset record at line {line}: {message}")]
    DatasetRecord { line: usize, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: non-finite loss at epoch {epoch}, step {step}; batch samples: {batch_ids:?}")]
    NanLoss {
        epoch: usize,
        step: usize,
        batch_ids: Vec<String>,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("png error: {0}")]
    Png(String),
}
