//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GritError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("decomposition of {name} failed: {reason}")]
    Decomposition { name: String, reason: String },

    #[error("matrix not positive definite after damping ladder (last multiplier {multiplier})")]
    Singular { multiplier: f64 },

    #[error("backward called without a matching forward pass")]
    TapeEmpty,

    #[error("natural-gradient preconditioner unavailable (inverses not ready)")]
    PreconditionUnavailable,

    #[error("value out of bounds: {0}")]
    Bound(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("underdetermined fit: {0}")]
    Underdetermined(String),

    #[error("unidentifiable geometry coefficients: {0}")]
    Unidentifiable(String),

    #[error("non-finite value at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<GritError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl GritError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        GritError::Shape(msg.into())
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ GritError::AtStep { .. } | e @ GritError::NonFinite { .. } => e,
            other => GritError::AtStep {
                step,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, GritError>;
