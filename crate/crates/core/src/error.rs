//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid label {value} for {num_classes} classes")]
    InvalidLabel { value: u8, num_classes: usize },

    #[error("empty histogram: no labeled pixels")]
    EmptyHistogram,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {what}")]
    TrainingDiverged { step: usize, what: String },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
