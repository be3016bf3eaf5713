use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A single value failed a domain check.
    #[error("invalid {what}: {reason}")]
    Validation { what: String, reason: String },

    /// A file header or declared structure does not match the expected layout.
    #[error("schema error in {path}: {reason}")]
    Schema { path: String, reason: String },

    /// A data row could not be parsed. `line` is 1-based and counts the header.
    #[error("{path}:{line}: {reason}")]
    Row {
        path: String,
        line: u64,
        reason: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no training signal: {0}")]
    NoTrainingSignal(String),

    #[error("unmodeled condition {condition:?}{}", user.as_ref().map(|u| format!(" for user {u:?}")).unwrap_or_default())]
    UnmodeledCondition {
        user: Option<String>,
        condition: String,
    },

    #[error("unknown song {0:?}")]
    UnknownSong(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("list families disagree on keys: {0}")]
    KeyMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(what: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            what: what.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (config, schema, malformed rows)
    /// rather than a failure while running a stage.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. }
                | Error::Schema { .. }
                | Error::Row { .. }
                | Error::Config(_)
                | Error::Io { .. }
        )
    }
}
