use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("vector norm {norm:e} is too small to project onto the sphere")]
    DegenerateNorm { norm: f64 },

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("non-finite function value at finite-difference probe {index}")]
    Eval { index: usize },

    #[error("covariance is not positive definite (pivot {pivot} = {value:e})")]
    SingularCovariance { pivot: usize, value: f64 },

    #[error("label noise needs at least two classes")]
    NoiseImpossible,

    #[error("non-finite gradient entry at parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("linear probe needs at least two classes, found {0}")]
    DegenerateLabels(usize),

    #[error("class {0} has no members in the batch")]
    EmptyClass(usize),

    #[error("empty kernel support: {0}")]
    EmptySupport(String),

    #[error("anchor {0} has no positive partner")]
    MissingPositive(usize),

    #[error("anchor {0} has no admissible negatives")]
    MissingNegative(usize),

    #[error("need more than k = {k} samples, got {n}")]
    InsufficientSamples { n: usize, k: usize },

    #[error("training aborted at epoch {epoch}, batch {batch}: {reason}")]
    Training { epoch: usize, batch: usize, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
