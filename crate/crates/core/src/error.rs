use thiserror::Error;

use crate::descent::StepRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown model kind `{0}`")]
    UnknownModel(String),

    #[error("non-finite values produced at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    /// A trajectory stopped early. `partial` holds the records produced before
    /// the failing step.
    #[error("trajectory failed at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: Box<Error>,
        partial: Box<Vec<StepRecord>>,
    },

    #[error("covariance block ({r}, {s}) is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd {
        r: usize,
        s: usize,
        min_eigenvalue: f64,
    },

    #[error("state evolution capped at {cap} steps")]
    StepCap { cap: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("toml parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("toml write error: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// True for failures caused by the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::NotPsd { .. }
        )
    }
}
