use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("experiment too short: T = {t}, need T >= (n_u+1)*n_x + n_u = {min}")]
    DataTooShort { t: usize, min: usize },

    #[error("experiment data is not persistently exciting: rank [U0; X0] < n_u + n_x")]
    NotPersistentlyExciting,

    #[error("interval [{lo}, {hi}] does not contain 0")]
    InvalidInterval { lo: f64, hi: f64 },

    #[error("multiplier entry {index} is negative ({value})")]
    InvalidMultiplier { index: usize, value: f64 },

    #[error("block matrix violates the feed-forward pattern: {0}")]
    MalformedN(String),

    #[error("I - C4 is singular")]
    SingularTransform,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("closed-loop state became non-finite at step {step}")]
    Diverged { step: usize },

    #[error("expert synthesis failed: {0}")]
    ExpertSynthesisFailed(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("ill-conditioned certificate: {0}")]
    IllConditionedCertificate(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("invalid state box: {0}")]
    InvalidBox(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dims<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidDimensions(msg.into()))
}
