use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not positive definite (pivot {pivot} is {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("class {class} has {count} samples, at least 2 are required to split")]
    ClassTooSmall { class: usize, count: usize },

    #[error("parse error at line {line}, column `{column}`: {message}")]
    Parse {
        line: usize,
        column: String,
        message: String,
    },

    #[error("schema error: missing column `{column}`")]
    Schema { column: String },

    #[error("inconsistent shape: {0}")]
    InconsistentShape(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("logit vector norm is below 1e-12, add jitter before normalizing")]
    ZeroLogitVector,

    #[error("forward trace does not belong to this model: {0}")]
    TraceMismatch(String),

    #[error("epoch {epoch} out of range for a {epochs}-epoch schedule")]
    EpochOutOfRange { epoch: usize, epochs: usize },

    #[error("class {class} has {have} banked features, {need} required")]
    InsufficientSamples {
        class: usize,
        have: usize,
        need: usize,
    },

    #[error("uncertainty loss needs at least one ID and one outlier score")]
    EmptyBatch,

    #[error("score population `{0}` is empty")]
    EmptyPopulation(&'static str),

    #[error("summary group `{0}` is empty")]
    EmptyGroup(&'static str),

    #[error("uncertainty maps need a 2-D input model, got input dimension {dim}")]
    NonPlanarModel { dim: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(expected: usize, found: usize) -> Self {
        Error::DimensionMismatch { expected, found }
    }
}
