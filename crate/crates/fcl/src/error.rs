//! Error type for the runner and its file formats.

use std::path::PathBuf;

use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum FclError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("simulation failed: {0}")]
    Core(#[from] fcl_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: no data")]
    NoData { path: PathBuf },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("stream file: {0}")]
    StreamFile(String),
}

pub type Result<T> = std::result::Result<T, FclError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> FclError {
    let path = path.into();
    move |source| FclError::Io { path, source }
}

pub(crate) fn csv_err(path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> FclError {
    let path = path.into();
    move |source| FclError::Csv { path, source }
}
