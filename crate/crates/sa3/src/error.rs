use std::path::PathBuf;

/// Failures surfaced by the IO layer and the command driver.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: missing or corrupt asset: {reason}")]
    MissingAsset { path: PathBuf, reason: String },
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },
    #[error(transparent)]
    Core(#[from] sa3_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { field: field.into(), message: message.into() }
    }

    /// Process exit status: 3 for numerical blow-ups, 2 for anything the
    /// user can fix by changing inputs, 1 for environment failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(sa3_core::Error::NonFinite { .. }) => 3,
            Error::Io { .. } => 1,
            _ => 2,
        }
    }
}
