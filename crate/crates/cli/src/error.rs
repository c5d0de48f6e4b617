use distrank::ErrorCategory;
use thiserror::Error;

#[derive(Debug, Error)]
#[error("{category}: {message}")]
pub struct CliError {
    pub category: ErrorCategory,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            category: ErrorCategory::Config,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            category: ErrorCategory::Io,
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            category: ErrorCategory::Validation,
            message: message.into(),
        }
    }

    /// 0 success, 1 validation/config, 2 backend, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.category {
            ErrorCategory::Config | ErrorCategory::Validation => 1,
            ErrorCategory::Backend => 2,
            ErrorCategory::Io => 3,
        }
    }
}

impl From<distrank::Error> for CliError {
    fn from(e: distrank::Error) -> Self {
        Self {
            category: e.category(),
            message: e.to_string(),
        }
    }
}
