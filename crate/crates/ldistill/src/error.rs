use std::path::PathBuf;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::protocol::ClientError;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Backend(ClientError),
    #[error(transparent)]
    Engine(#[from] ldistill_core::Error),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("output directory {0} is in use by another run")]
    Busy(PathBuf),
    #[error("gradient check failed: max relative error {max_rel_err:e} exceeds {threshold:e}")]
    Gradcheck { max_rel_err: f64, threshold: f64 },
}

impl From<ClientError> for RunError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Engine(inner) => RunError::Engine(inner),
            other => RunError::Backend(other),
        }
    }
}

impl RunError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| RunError::Io { path, source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        RunError::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit status: 2 configuration, 3 runtime, 4 backend.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Unsupported(_) => 2,
            RunError::Backend(_) => 4,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Unsupported(_) => "unsupported",
            RunError::Backend(e) => e.kind(),
            RunError::Engine(_) => "engine",
            RunError::Checkpoint(_) => "checkpoint",
            RunError::Io { .. } => "io",
            RunError::Format { .. } => "format",
            RunError::Integrity(_) => "integrity",
            RunError::Busy(_) => "busy",
            RunError::Gradcheck { .. } => "gradcheck",
        }
    }

    /// The single structured line printed to stderr on failure.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}
