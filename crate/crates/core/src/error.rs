use thiserror::Error;

/// Errors raised by the simulation and diagnostics routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel is reducible: {0}")]
    ReducibleChain(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("non-finite TD update at step {step}")]
    NonFiniteUpdate { step: u64 },
    #[error("linear system is singular: {0}")]
    SingularSystem(String),
    #[error("history was recorded without the per-step stream")]
    MissingStepData,
    #[error("need at least {needed} seeds, got {got}")]
    InsufficientSeeds { needed: usize, got: usize },
    #[error("trajectory of {len} observations is too short for block size {block_size}")]
    TrajectoryTooShort { len: usize, block_size: usize },
    #[error("non-positive value {value} at t = {t}")]
    NonPositiveValue { t: f64, value: f64 },
    #[error("fit window holds {points} points, need at least {needed}")]
    WindowTooSmall { points: usize, needed: usize },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
