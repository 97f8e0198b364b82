use kneexr_core::CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Integrity(_) => 3,
            CliError::Io { .. } => 4,
        }
    }

    pub fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.display().to_string(), message: err.to_string() }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Usage(m) => CliError::Usage(m),
            CoreError::Spec(m) => CliError::Usage(format!("invalid spec: {m}")),
            CoreError::Integrity(m) => CliError::Integrity(m),
            p @ CoreError::Parse { .. } => CliError::Integrity(p.to_string()),
            CoreError::Io { path, message } => CliError::Io { path, message },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
