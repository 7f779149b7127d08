use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum CordError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, CordError>;

impl CordError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CordError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI contract: 2 for divergence, 3 for I/O,
    /// 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CordError::Diverged(_) | CordError::NonFinite(_) => 2,
            CordError::Io { .. } => 3,
            _ => 1,
        }
    }
}
