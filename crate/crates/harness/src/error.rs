use std::path::PathBuf;

use wc4dvar_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("result was produced by config {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },
    #[error(transparent)]
    Numerical(CoreError),
}

impl HarnessError {
    /// 0 success, 2 invalid config, 3 numerical failure, 4 budget refusal.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Json(_) | HarnessError::HashMismatch { .. } => 2,
            HarnessError::Read { .. } => 2,
            HarnessError::Numerical(e) => match e.root() {
                CoreError::BudgetExceeded { .. } => 4,
                CoreError::InvalidArgument(_) => 2,
                _ => 3,
            },
            HarnessError::Write { .. } | HarnessError::Csv(_) => 1,
        }
    }
}

impl From<CoreError> for HarnessError {
    fn from(e: CoreError) -> Self {
        HarnessError::Numerical(e)
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
