use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Channel or extent mismatch; `context` names the layer or edge.
    #[error("{context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("structural error: {0}")]
    Structural(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("filters not identical in layer {layer}: worst deviation {deviation:e} exceeds {tolerance:e}")]
    NotIdentical {
        layer: usize,
        deviation: f64,
        tolerance: f64,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("corrupt model file: {0}")]
    CorruptFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
