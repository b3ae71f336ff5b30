use sparsedec_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 usage, 3 data or format, 4 internal invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                CoreError::Schedule(_) | CoreError::Budget { .. } => 2,
                CoreError::Input(_) | CoreError::Format(_) | CoreError::Io(_) => 3,
                CoreError::Shape(_) | CoreError::Bounds { .. } | CoreError::State(_) => 4,
            },
            CliError::Io(_) => 3,
            CliError::Json(_) => 4,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
