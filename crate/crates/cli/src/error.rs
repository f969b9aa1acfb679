use std::path::PathBuf;

use scalebayes_core::Error as CoreError;

/// Process exit status for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;
/// Process exit status for numeric failures and failing checks.
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// A document failed validation; `pointer` is a JSON pointer to the
    /// offending value.
    #[error("schema error at {pointer}: {message}")]
    Schema { pointer: String, message: String },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("check failed: {0}")]
    CheckFailed(String),
}

impl HarnessError {
    pub fn schema(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Schema { pointer: pointer.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Schema { .. } | Self::Usage(_) | Self::Io { .. } => EXIT_USAGE,
            Self::Core(CoreError::Argument(_) | CoreError::Unsupported(_) | CoreError::Capacity { .. }) => EXIT_USAGE,
            Self::Core(_) | Self::CheckFailed(_) => EXIT_NUMERIC,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
