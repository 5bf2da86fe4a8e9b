use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the toolkit. Variants map onto the CLI exit codes:
/// config/dimension/input -> 2, I/O -> 3, numerical -> 4, missing annotations -> 5.
#[derive(Debug, Error)]
pub enum PylonError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("optimizer error on `{name}`: {reason}")]
    Optimizer { name: String, reason: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("ingestion error at {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("no bounding-box annotations found: {0}")]
    MissingAnnotations(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PylonError>;

impl PylonError {
    /// Stable process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            PylonError::Dimension(_)
            | PylonError::Config(_)
            | PylonError::Input(_)
            | PylonError::Metric(_) => 2,
            PylonError::Io(_) | PylonError::Ingestion { .. } | PylonError::Checkpoint(_) => 3,
            PylonError::Numerical(_) | PylonError::Optimizer { .. } => 4,
            PylonError::MissingAnnotations(_) => 5,
        }
    }
}
