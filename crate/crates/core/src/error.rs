use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyper-parameters, shapes that cannot be wired together, bad
    /// config keys.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input tensors whose shape does not satisfy an operation's contract.
    #[error("input error: {0}")]
    Input(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Malformed files on disk.
    #[error("format error in {path}: {msg} (at byte {offset})")]
    Format {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("data error: {0}")]
    Data(String),

    /// NaN/Inf encountered in values or gradients.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Input(_) => 2,
            Error::Format { .. } | Error::Data(_) | Error::Io { .. } => 3,
            Error::Numerical(_) | Error::UndefinedMetric(_) => 4,
        }
    }
}
