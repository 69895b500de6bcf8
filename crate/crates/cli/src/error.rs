use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] burstsr::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for I/O and malformed input, 3 for configuration, 4 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        use burstsr::Error as E;
        match self {
            CliError::Io { .. } => 2,
            CliError::Usage(_) => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(E::Io(_) | E::Format { .. } | E::EmptyBurst) => 2,
            CliError::Core(_) => 3,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
