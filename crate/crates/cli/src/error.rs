use std::path::PathBuf;

use portrait_core::Error as CoreError;
use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_TOLERANCE: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    /// A config file that does not deserialize; `field` is the JSON path.
    #[error("config {file}: {field}: {reason}")]
    Config {
        file: PathBuf,
        field: String,
        reason: String,
    },

    #[error("{field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// One line per breached check, with achieved and required values.
    #[error("{} tolerance check(s) failed", .0.len())]
    Tolerance(Vec<String>),
}

impl CliError {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) => match e.root() {
                CoreError::MissingFile(_)
                | CoreError::UnsupportedFormat { .. }
                | CoreError::UnsupportedBitDepth { .. }
                | CoreError::TruncatedPayload { .. }
                | CoreError::Write { .. }
                | CoreError::Io { .. } => EXIT_IO,
                _ => EXIT_VALIDATION,
            },
            CliError::Config { .. } | CliError::Validation { .. } => EXIT_VALIDATION,
            CliError::Io { .. } => EXIT_IO,
            CliError::Tolerance(_) => EXIT_TOLERANCE,
        }
    }
}
