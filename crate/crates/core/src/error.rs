use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl CoreError {
    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CoreError::Io { path: path.display().to_string(), message: err.to_string() }
    }
}

impl From<kneexr_nn::NnError> for CoreError {
    fn from(e: kneexr_nn::NnError) -> Self {
        match e {
            kneexr_nn::NnError::Integrity(m) => CoreError::Integrity(m),
            kneexr_nn::NnError::Io { path, source } => CoreError::Io { path, message: source.to_string() },
            other => CoreError::Usage(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
