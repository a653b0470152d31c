use thiserror::Error;

pub type Result<T, E = NnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid tensor shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),

    #[error("tensor of shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("layer {index} ({layer}): {reason}")]
    LayerShape {
        index: usize,
        layer: String,
        reason: String,
    },

    #[error("network input shape mismatch: expected {expected:?}, got {actual:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("stale or mismatched forward cache: {0}")]
    StaleCache(String),

    #[error("loss gradient shape mismatch: expected {expected:?}, got {actual:?}")]
    LossGradientShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("gradient shape mismatch at layer {layer}: {reason}")]
    GradientShape { layer: usize, reason: String },

    #[error("label {0} is outside {{0, 1}}")]
    InvalidLabel(f64),

    #[error("class label {label} out of range for {classes} classes")]
    InvalidClass { label: usize, classes: usize },

    #[error("non-finite gradient in layer {layer} ({param}); training aborted")]
    NonFiniteGradient { layer: usize, param: &'static str },

    #[error("train-mode dropout at layer {0} requires a random stream")]
    MissingRandomStream(usize),

    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),

    #[error("{inputs} inputs but {targets} targets")]
    TargetCount { inputs: usize, targets: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
