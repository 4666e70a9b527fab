use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced in stage `{0}`")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("frozen parameter `{0}` was modified")]
    FrozenModified(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category, used by the CLI for exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non_finite",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Format(_) => "format",
            Error::Truncated(_) => "truncated",
            Error::Version { .. } => "version",
            Error::ConfigMismatch(_) => "config_mismatch",
            Error::Config(_) => "config",
            Error::Diverged { .. } => "diverged",
            Error::FrozenModified(_) => "frozen_modified",
            Error::MissingInput(_) => "missing_input",
            Error::Io(_) => "io",
            Error::Json(_) => "format",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::MissingInput(_) | Error::Io(_) => 3,
            Error::Format(_) | Error::Truncated(_) | Error::Json(_) => 4,
            Error::Version { .. } | Error::ConfigMismatch(_) => 5,
            Error::Shape(_) => 6,
            Error::NonFinite(_) | Error::Diverged { .. } => 7,
            Error::FrozenModified(_) => 8,
        }
    }
}
