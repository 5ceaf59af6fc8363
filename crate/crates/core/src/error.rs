use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AmpError>;

#[derive(Debug, Error)]
pub enum AmpError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid prune plan: {0}")]
    Plan(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("numeric failure at step {step}: {detail}")]
    NumericFailure { step: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AmpError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AmpError::Io {
            path: path.into(),
            source,
        }
    }

    /// Reclassifies a domain error raised inside training step `step`.
    pub(crate) fn during_step(self, step: usize) -> Self {
        match self {
            AmpError::NumericDomain(detail) => AmpError::NumericFailure { step, detail },
            other => other,
        }
    }
}
