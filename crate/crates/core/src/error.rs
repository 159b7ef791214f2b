//! Crate-wide error type and result alias.
//!
//! Every fallible operation in the library returns [`Result`]. Variants are
//! grouped by subsystem so callers can match on the failure class without
//! string-sniffing; the CLI maps any error to a nonzero exit code with the
//! rendered message on stderr.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent with another.
    #[error("config error: {0}")]
    Config(String),

    /// A token id or token payload does not exist in the vocabulary.
    #[error("invalid token: {0}")]
    InvalidToken(String),

    /// The knowledge base cannot support the requested question.
    #[error("no path: {0}")]
    NoPath(String),

    /// An episode was stepped after it finished.
    #[error("episode already finished")]
    EpisodeDone,

    /// Two containers that must agree in shape do not.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numeric invariant was violated (non-finite value, degenerate scale).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Critique text contains no complete `<score>...</score>` span.
    #[error("no <score>...</score> span found in critique text")]
    MissingScore,

    /// A `<score>` entry was neither `0` nor `1`.
    #[error("bad score token: {0:?}")]
    BadScoreToken(String),

    /// The number of parsed scores does not match the number of search turns.
    #[error("score count mismatch: expected {expected}, got {got}")]
    CountMismatch { expected: usize, got: usize },

    /// The remote critic endpoint failed after all retries.
    #[error("critic endpoint error: {0}")]
    Endpoint(String),

    /// A persisted file (checkpoint, knowledge base, records) is malformed.
    #[error("parse error in {path}: {message}")]
    FileFormat { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for a [`Error::FileFormat`] with owned strings.
    pub fn file_format(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::FileFormat {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }
}
