//! Error type shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: {dimension} mismatch, expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        dimension: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("frame sequence must contain at least one frame and one channel")]
    EmptySequence,

    #[error("zero-norm {0}: cosine is undefined")]
    ZeroNorm(&'static str),

    #[error("centroid is not initialized (no bonafide sample seen yet)")]
    CentroidUninitialized,

    #[error("centroid is already initialized")]
    CentroidAlreadyInitialized,

    #[error("bonafide batch summary requires at least one sample; skip the update instead")]
    EmptyBatchSummary,

    #[error("not enough {class} samples: need {needed}, have {available}")]
    InsufficientSamples {
        class: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("no {0} scores to evaluate")]
    EmptyClass(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },

    #[error("missing feature files for: {}", .0.join(", "))]
    MissingUtterances(Vec<String>),

    #[error("unknown {what}: `{value}`")]
    UnknownKind { what: &'static str, value: String },

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: u32, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
