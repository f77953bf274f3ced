use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("batch norm in eval mode requires populated running statistics")]
    MissingRunningStats,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("artifact mismatch: {0}")]
    Mismatch(String),

    #[error("{path}: bad magic bytes (expected {expected:?})")]
    BadMagic {
        path: PathBuf,
        expected: &'static str,
    },

    #[error("{path}: unsupported format version {found}")]
    UnsupportedVersion { path: PathBuf, found: u32 },

    #[error("{path}: truncated file (needed {needed} bytes, found {found})")]
    Truncated {
        path: PathBuf,
        needed: usize,
        found: usize,
    },

    #[error("{path}: malformed file: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end: 2 config, 3 artifact mismatch,
    /// 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 4,
            Error::Mismatch(_)
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::Malformed { .. } => 3,
            _ => 2,
        }
    }
}
