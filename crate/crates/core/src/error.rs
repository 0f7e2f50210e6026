use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty label track")]
    EmptyTrack,

    #[error("zero-length segment at position {0}")]
    ZeroLengthSegment(usize),

    #[error("invalid window: {0}")]
    InvalidWindow(String),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("non-finite features")]
    NonFiniteFeatures,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty corpus: no transitions observed")]
    EmptyCorpus,

    /// A loss term evaluated to NaN or infinity during training.
    #[error("non-finite loss term `{term}` at epoch {epoch}, step {step}")]
    NonFiniteLoss { term: String, epoch: usize, step: usize },

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
