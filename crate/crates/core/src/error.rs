use std::io;

use thiserror::Error;

/// Errors raised anywhere in the engine.
///
/// The variant doubles as a stable machine-readable category for the CLI
/// (see [`Error::kind`]).
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, geometry, hyperparameters or configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Bad user-provided data (files, labels, empty sets).
    #[error("input error: {0}")]
    Input(String),
    /// Broken internal invariant (missing records, overflow).
    #[error("internal error: {0}")]
    Internal(String),
    /// Training diverged.
    #[error("run error at epoch {epoch}: {message}")]
    Run { epoch: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Internal(_) => "internal",
            Error::Run { .. } => "run",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
