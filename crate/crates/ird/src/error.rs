use std::path::{Path, PathBuf};

/// Exit status for invalid input (bad config, malformed file, shape errors).
pub const EXIT_INVALID: i32 = 2;
/// Exit status when a numerical failure aborts a command.
pub const EXIT_NUMERICAL: i32 = 3;
/// Exit status when a gradient audit exceeds its tolerance.
pub const EXIT_CHECK: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ird_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed on {failed} of {total} probes")]
    GradcheckFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(ird_core::Error::NonFinite { .. } | ird_core::Error::Internal(_)) => EXIT_NUMERICAL,
            CliError::GradcheckFailed { .. } => EXIT_CHECK,
            _ => EXIT_INVALID,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        CliError::Format { path: path.to_path_buf(), message: message.into() }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
