use std::path::Path;

use thiserror::Error;
use xkv_core::error::XkvError;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] XkvError),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config_error",
            CliError::Io { .. } => "io_failure",
            CliError::Core(e) => e.code(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(XkvError::Json(e))
    }
}
