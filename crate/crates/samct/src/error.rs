//! Crate-wide error type with CLI exit-code mapping.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum SamctError {
    /// Invalid configuration. The message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or missing input data.
    #[error("data error: {0}")]
    Data(String),

    /// A contract the model must uphold was broken (e.g. a frozen parameter
    /// changed during training).
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl SamctError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code: 2 config, 3 data, 4 invariant violation, 1 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) | Self::Io { .. } => 3,
            Self::Invariant(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T, E = SamctError> = std::result::Result<T, E>;
