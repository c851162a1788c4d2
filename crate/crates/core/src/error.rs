use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter failed validation. `field` is the dotted config path.
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParam { field: String, reason: String },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("covariance factorization failed: {0}")]
    Factorization(String),

    #[error("joint state would exceed {max} recorded outcomes")]
    DimensionOverflow { max: usize },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    #[error("row {index} of the covariance matrix has zero variance")]
    ZeroVariance { index: usize },

    #[error("empty gain grid")]
    EmptyGrid,

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn param(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
