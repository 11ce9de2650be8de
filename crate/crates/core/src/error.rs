use std::path::PathBuf;

/// Errors raised by tensor operations, model code, and file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: String,
        got: String,
    },

    #[error("{0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("{}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },

    #[error("training diverged at step {step} (non-finite loss)")]
    Diverged { step: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(
        op: &'static str,
        axis: impl ToString,
        expected: impl ToString,
        got: impl ToString,
    ) -> Self {
        Error::Dimension {
            op,
            axis: axis.to_string(),
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
