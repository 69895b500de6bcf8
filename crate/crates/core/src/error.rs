use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed {kind} data: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("invalid dimensions: {0}")]
    Dimensions(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate warp (det = {det})")]
    DegenerateWarp { det: f64 },

    #[error("singular normal equations ({0})")]
    Singular(&'static str),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("empty burst")]
    EmptyBurst,
}

impl Error {
    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            kind,
            msg: msg.into(),
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::Dimensions(msg.into())
    }

    /// Whether the error stems from the numerics rather than inputs or I/O.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateWarp { .. } | Error::Singular(_) | Error::NonFinite(_)
        )
    }
}
