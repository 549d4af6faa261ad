use std::io;
use std::path::{Path, PathBuf};

/// Failures surfaced by pipelines and the command line.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("usage: {0}")]
    Usage(String),
    /// A required input (manifest, checkpoint, directory) is absent.
    #[error("missing dependency: {0}")]
    Missing(String),
    /// Training produced non-finite values; the last good checkpoint, if any,
    /// is kept on disk.
    #[error("numerical abort: {message}")]
    Numerical {
        message: String,
        checkpoint: Option<PathBuf>,
    },
    #[error(transparent)]
    Core(#[from] sslab_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Format(String),
}

pub type AppResult<T> = std::result::Result<T, AppError>;

impl AppError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        AppError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Stable process exit code: 1 usage, 2 missing dependency, 3 numerical
    /// abort. Other runtime failures also report 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Missing(_) => 2,
            AppError::Numerical { .. } | AppError::Core(sslab_core::Error::NonFinite(_)) => 3,
            _ => 1,
        }
    }

    /// Attaches a last-good checkpoint to a numerical failure; other errors
    /// pass through.
    pub fn with_checkpoint(self, path: &Path) -> Self {
        match self {
            AppError::Core(sslab_core::Error::NonFinite(m)) => AppError::Numerical {
                message: format!("non-finite value produced by {m}"),
                checkpoint: path.exists().then(|| path.to_path_buf()),
            },
            other => other,
        }
    }
}

impl From<csv::Error> for AppError {
    fn from(e: csv::Error) -> Self {
        AppError::Format(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Format(format!("json: {e}"))
    }
}
