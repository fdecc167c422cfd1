use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("timestep {t} out of range [1, {max}]")]
    TimestepOutOfRange { t: f64, max: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("stage contract violation: {0}")]
    StageContract(String),

    #[error("gradient reached frozen parameter `{0}`")]
    FrozenParamGradient(String),

    #[error("optimizer step rejected: {0}")]
    OptimizerStep(String),

    #[error("covariance not positive semi-definite: min eigenvalue {0}")]
    NotPsd(f64),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("sampler diverged at step {step}: {detail}")]
    SamplerDiverged { step: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
