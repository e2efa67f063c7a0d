use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HagcnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HagcnError {
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (largest parameter norm {param_norm:.4e} in `{param}`)"
    )]
    NonFinite {
        epoch: usize,
        batch: usize,
        param: String,
        param_norm: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HagcnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HagcnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(field: &str, message: impl Into<String>) -> Self {
        HagcnError::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }
}
