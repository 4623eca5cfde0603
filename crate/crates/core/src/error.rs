use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("latent vectors must have at least one component")]
    EmptyVector,

    #[error("non-finite value produced at component {index}")]
    NonFinite { index: usize },

    #[error("time {t} outside [0, 1]")]
    Domain { t: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("condition index {index} out of range for {n_components} component(s)")]
    Condition { index: usize, n_components: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("oracle has too few effective samples near the probe (ess = {ess:.1}, need >= 100)")]
    OracleInsufficient { ess: f64 },

    #[error("trajectory diverged at step {step}")]
    Divergence { step: usize },

    #[error("invalid config: {field}: {message}")]
    Validation { field: String, message: String },

    #[error("failed to parse {path}: {message} at line {line}, column {column}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } | Error::NonFinite { .. } => 2,
            Error::Io { .. } => 3,
            _ => 1,
        }
    }
}
