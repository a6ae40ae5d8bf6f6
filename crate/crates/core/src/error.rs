use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the simulator, optimizers and experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an input contract (dimension mismatch, unnormalized
    /// state, out-of-range parameter).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training produced a non-finite loss.
    #[error("diverged: {0}")]
    Diverged(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("JSON error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
