use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad flags, config values or arguments.
    #[error("usage error: {0}")]
    Usage(String),
    /// A violated operation precondition (shapes, ranges, alignment).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("cannot ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },
    /// Dataset splitting or labeled-subset selection failed.
    #[error("data error: {0}")]
    Data(String),
    #[error("non-finite {term} at step {step}")]
    Numerical { term: String, step: u64 },
    #[error("checkpoint {path} is corrupt: {reason}")]
    Integrity { path: PathBuf, reason: String },
    #[error("checkpoint {path} has format version {found}, this build reads version {expected}")]
    Version { path: PathBuf, found: u32, expected: u32 },
    #[error(transparent)]
    Nn(#[from] tbigan_nn::NnError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Contract(_) | Error::Nn(_) => 2,
            Error::Ingest { .. } | Error::Data(_) => 3,
            Error::Numerical { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
