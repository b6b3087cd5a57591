use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("scale must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("numeric overflow: {0}")]
    Overflow(String),

    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("diffusion step {step} outside 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("diffusion time {s} outside [0, {horizon}]")]
    SOutOfRange { s: f64, horizon: f64 },

    #[error("score is undefined at diffusion time 0")]
    DegenerateTime,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("positional encoding dimension must be even, got {0}")]
    OddDim(usize),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("empty sample set")]
    EmptySampleSet,

    #[error("final noise level too high: sqrt(alpha_bar_N) = {0:.4} >= 0.05")]
    FinalNoiseTooLarge(f64),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
