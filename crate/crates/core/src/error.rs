//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad hyper-parameters, impossible dataset request).
    #[error("config error: {0}")]
    Config(String),
    /// Malformed or inconsistent input files.
    #[error("data error: {0}")]
    Data(String),
    /// Shape contract violated by a tensor operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// NaN/Inf, non-deterministic loss and similar runtime failures.
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Shape(_) | Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
