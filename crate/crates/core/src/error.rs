use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure classes. The CLI maps these onto stable exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Malformed or inconsistent files and byte streams.
    Format,
    /// Numeric preconditions: non-stochastic rows, degenerate inputs, divergence.
    Numeric,
    /// Invalid configuration or arguments that passed CLI parsing.
    Config,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("codec error: {0}")]
    Codec(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row {row} of {context} sums to {sum} (expected 1 within 1e-6)")]
    NotStochastic {
        context: String,
        row: usize,
        sum: f64,
    },

    #[error("degenerate input in {op}: {message}")]
    Degenerate { op: &'static str, message: String },

    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Codec(_) | Error::Manifest { .. } | Error::Image(_) => ErrorClass::Format,
            Error::Shape(_) | Error::MissingParam(_) => ErrorClass::Format,
            Error::NotStochastic { .. } | Error::Degenerate { .. } | Error::Diverged { .. } => {
                ErrorClass::Numeric
            }
            Error::Config(_) => ErrorClass::Config,
            Error::Io(_) => ErrorClass::Io,
        }
    }

    pub(crate) fn codec(msg: impl Into<String>) -> Self {
        Error::Codec(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
