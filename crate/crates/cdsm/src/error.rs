//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the cascade pipeline.
#[derive(Error, Debug)]
pub enum CdsmError {
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("graph integrity error: {0}")]
    Integrity(String),
    #[error("dimension error in {op}: {msg}")]
    Dimension { op: String, msg: String },
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training error at step {step}: {msg}")]
    Training { step: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing input for stage `{stage}`: {msg} (produce it with `{producer}`)")]
    Dependency {
        stage: String,
        producer: String,
        msg: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CdsmError>;

impl CdsmError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CdsmError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dim(op: impl Into<String>, msg: impl Into<String>) -> Self {
        CdsmError::Dimension {
            op: op.into(),
            msg: msg.into(),
        }
    }
}
