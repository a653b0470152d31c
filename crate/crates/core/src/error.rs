use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MintError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MintError {
    #[error(transparent)]
    Nn(#[from] nnkit::NnError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("partition violation: {0}")]
    Partition(String),

    #[error("insufficient samples: need {need_member} member and {need_external} external, have {have_member} and {have_external}")]
    InsufficientSamples {
        need_member: usize,
        need_external: usize,
        have_member: usize,
        have_external: usize,
    },

    #[error("unknown tap point {0:?}")]
    UnknownTap(String),

    #[error("record {sample_id} is missing tap {tap}")]
    MissingTap { sample_id: String, tap: String },

    #[error("invalid feature request: {0}")]
    FeatureKind(String),

    #[error("feature shape mismatch: expected {expected:?}, got {actual:?}")]
    FeatureShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("classifier has not been trained")]
    Untrained,

    #[error("invalid training set: {0}")]
    TrainingSet(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("cache format error at offset {offset}: {reason}")]
    CacheFormat { offset: usize, reason: String },

    #[error("artifact error in {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error("unknown report format {0:?}")]
    ReportFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
