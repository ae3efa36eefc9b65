use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("enumeration cap exceeded: {entries} table entries > cap {cap}")]
    CapExceeded { entries: u128, cap: u64 },

    #[error("non-finite logit at index {0}")]
    NonFiniteLogit(usize),

    #[error("action index {index} out of range for {len} actions")]
    ActionOutOfRange { index: usize, len: usize },

    #[error("degenerate policy: 1 - ||pi||^2 = {0:e} is at or below tolerance")]
    DegeneratePolicy(f64),

    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("baseline denominator is zero: every log-policy gradient vanishes")]
    ZeroDenominator,

    #[error("value system (I - gamma P) is singular")]
    SingularSystem,

    #[error("value tables were solved for a different policy")]
    TablesMismatch,

    #[error("agent subsets overlap at agent {0}")]
    OverlappingSubsets(usize),

    #[error("invalid agent subset: {0}")]
    InvalidSubset(String),

    #[error("agent {0} does not have a softmax policy")]
    NotDiscrete(usize),

    #[error("invalid game: {0}")]
    InvalidGame(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training diverged at iteration {iteration}: |J| = {value} exceeds {limit}")]
    Diverged {
        iteration: usize,
        value: f64,
        limit: f64,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
