use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("{path}: header promises {expected} samples but the file holds {found}")]
    Truncated { path: PathBuf, expected: usize, found: usize },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("invalid {field}: {reason}")]
    Config { field: String, reason: String },
    #[error(transparent)]
    Core(#[from] attrank_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// 2 for failures while computing, 1 for bad inputs.
    pub fn exit_code(&self) -> i32 {
        use attrank_core::Error as C;
        match self {
            Error::Core(C::Divergence { .. } | C::NonFinite(_)) => 2,
            _ => 1,
        }
    }
}
