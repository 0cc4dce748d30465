use std::path::PathBuf;

use crate::diff::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum FinvError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed {what} in {}: {detail}", path.display())]
    Malformed {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FinvError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            FinvError::MissingFile(path)
        } else {
            FinvError::Io { path, source }
        }
    }

    pub(crate) fn malformed(what: &'static str, path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        FinvError::Malformed {
            what,
            path: path.into(),
            detail: detail.to_string(),
        }
    }

    /// True for failures caused by non-finite values during optimization.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FinvError::Numerical(_) | FinvError::Diff(DiffError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = FinvError> = std::result::Result<T, E>;
