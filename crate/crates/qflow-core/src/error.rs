use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum QflowError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("Green kernel undefined on constants")]
    GreenOnConstants,

    #[error("supercritical gamma: {gamma} not in [0, sqrt(2n)) = [0, {limit})")]
    SupercriticalGamma { gamma: f64, limit: f64 },

    #[error("degenerate measure for inversion")]
    DegenerateInversion,

    #[error("mollifier support smaller than grid resolution")]
    MollifierTooNarrow,

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("nonpositive log argument: {0}")]
    NonpositiveLog(String),

    #[error("marginal not normalizable (A2/A2' violated): {0}")]
    MomentCondition(String),

    #[error("effective sample size {ess:.1} below required {required}")]
    LowEffectiveSampleSize { ess: f64, required: f64 },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("numerical abort: {0}")]
    NumericalAbort(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, QflowError>;
