use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = KadError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum KadError {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("infeasible assignment: {predictions} predictions for {ground_truths} ground truths")]
    Infeasible {
        predictions: usize,
        ground_truths: usize,
    },

    #[error("problem too large for exhaustive search: {0} rows (max 8)")]
    TooLarge(usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("degenerate embedding: norm {0:e} at layer {1}")]
    DegenerateEmbedding(f64, usize),

    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("corrupted file {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("incomplete cache at {path}: {reason}")]
    IncompleteCache { path: PathBuf, reason: String },

    #[error("provider error: {0}")]
    Provider(String),

    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("ambiguous annotation for image {0}: several objects and no active flag")]
    Ambiguous(u64),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl KadError {
    pub(crate) fn corruption(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        KadError::Corruption {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn incomplete(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        KadError::IncompleteCache {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        KadError::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
