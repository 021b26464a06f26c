use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PandaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PandaError {
    #[error(transparent)]
    Core(#[from] panda_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),
    #[error("cannot decode image {path}: {reason}")]
    UndecodableImage { path: PathBuf, reason: String },
    #[error("cannot write checkpoint {path}: {source}")]
    CheckpointWrite {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config file {path}: {reason}")]
    ConfigSyntax { path: PathBuf, reason: String },
    #[error("unknown report format `{0}`; supported formats: toml, csv")]
    UnknownFormat(String),
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error("{0}")]
    Usage(String),
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> PandaError {
    let path = path.into();
    move |source| PandaError::Io { path, source }
}
