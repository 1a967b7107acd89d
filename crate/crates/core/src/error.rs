use std::fmt;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum TsmError {
    #[error("dimension error in {context}: {message}")]
    Dimension { context: String, message: String },

    #[error("index {index} out of range for {context} (size {size})")]
    Index { context: String, index: usize, size: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training diverged at iteration {iteration}: {message}")]
    Numerical { iteration: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TsmError>;

impl TsmError {
    pub(crate) fn dim(context: impl fmt::Display, message: impl fmt::Display) -> Self {
        TsmError::Dimension {
            context: context.to_string(),
            message: message.to_string(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl fmt::Display) -> Self {
        TsmError::Format {
            offset,
            message: message.to_string(),
        }
    }
}
