use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("config error: {0}")]
    Config(String),

    /// Non-finite activation or loss. `iteration` is the GRU iteration (or
    /// training step) at which it was first seen.
    #[error("numeric error at iteration {iteration}: {message}")]
    Numeric { iteration: usize, message: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {kind}")]
    Format { path: PathBuf, kind: FormatError },
}

/// Reasons a frame-pair or checkpoint file is rejected on read.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("unknown flag bits {0:#x}")]
    BadFlags(u32),
    #[error("size mismatch: expected {expected} bytes, found {found}")]
    SizeMismatch { expected: u64, found: u64 },
    #[error("ego rotation is not orthonormal")]
    NonOrthonormal,
    #[error("invalid payload: {0}")]
    Payload(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, kind: FormatError) -> Self {
        Error::Format { path: path.into(), kind }
    }

    /// True for errors caused by bad user input (config, files, shapes).
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Config(_) | Error::Format { .. })
    }
}

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}
