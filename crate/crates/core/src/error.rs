use std::path::PathBuf;

/// Errors raised across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {key}: {reason}")]
    Config { key: String, reason: String },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("group has {0} members, advantage estimation needs at least 2")]
    GroupTooSmall(usize),

    #[error("rollout {index} has no {field}")]
    MissingField { index: usize, field: &'static str },

    #[error("anchor belongs to prompt {found}, group prompt is {expected}")]
    PromptMismatch { expected: String, found: String },

    #[error("mask set does not match partition: {0}")]
    MaskMismatch(String),

    #[error("judge unavailable: {0}")]
    JudgeUnavailable(String),

    #[error("malformed judgment: {0:?}")]
    MalformedJudgment(String),

    #[error("non-finite gradient entry at {0}")]
    NonFiniteGradient(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    File { path: PathBuf, reason: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
