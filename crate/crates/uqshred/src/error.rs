use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },

    /// A configuration value violates its documented constraints.
    #[error("invalid config: {0}")]
    Config(String),

    /// A runtime argument outside its domain (empty input, bad level, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Training aborted; the message names the epoch and batch.
    #[error("training aborted: {0}")]
    Training(String),

    /// A file failed to parse; the message names the offending location.
    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op: op.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
