use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse grouping used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Backend,
    Validation,
}

impl std::fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ErrorCategory::Config => "config",
            ErrorCategory::Io => "io",
            ErrorCategory::Backend => "backend",
            ErrorCategory::Validation => "validation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid MCQ {id}: {}", violations.join("; "))]
    InvalidMcq { id: String, violations: Vec<String> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("malformed model output: no labelled distractors found")]
    MalformedOutput,

    #[error("transport error: {0}")]
    Transport(String),

    #[error("backend returned status {status}: {body}")]
    BackendStatus { status: u16, body: String },

    #[error("request timed out: {0}")]
    Timeout(String),

    #[error("backend does not support {0}")]
    Capability(String),

    #[error("unscripted request: {0}")]
    Unscripted(String),

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io { .. } | Error::Csv(_) | Error::Json(_) => ErrorCategory::Io,
            Error::Transport(_)
            | Error::BackendStatus { .. }
            | Error::Timeout(_)
            | Error::Capability(_)
            | Error::Unscripted(_)
            | Error::MalformedOutput => ErrorCategory::Backend,
            Error::Parse { .. }
            | Error::InvalidMcq { .. }
            | Error::Precondition(_)
            | Error::Undefined(_) => ErrorCategory::Validation,
        }
    }

    /// Transport-level failures are worth retrying; status errors are not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport(_) | Error::Timeout(_))
    }
}
