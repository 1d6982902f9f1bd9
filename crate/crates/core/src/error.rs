use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors shared across the whole pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    Shape { op: &'static str, message: String },
    /// Value outside the mathematical domain of an operation.
    Domain { op: &'static str, message: String },
    /// Invalid configuration (file contents or programmatic settings).
    Config { message: String },
    /// Synthetic data generation failed.
    Generation { message: String },
    /// Checkpoint contents incompatible with the model being built.
    Checkpoint { message: String },
    /// Filesystem or format-level I/O failure.
    Io { message: String },
}

impl Error {
    pub fn shape(op: &'static str, message: impl Into<String>) -> Self {
        Error::Shape { op, message: message.into() }
    }

    pub fn domain(op: &'static str, message: impl Into<String>) -> Self {
        Error::Domain { op, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config { message: message.into() }
    }

    pub fn generation(message: impl Into<String>) -> Self {
        Error::Generation { message: message.into() }
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        Error::Checkpoint { message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Error::Io { message: message.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, message } => write!(f, "shape error in {op}: {message}"),
            Error::Domain { op, message } => write!(f, "domain error in {op}: {message}"),
            Error::Config { message } => write!(f, "config error: {message}"),
            Error::Generation { message } => write!(f, "generation error: {message}"),
            Error::Checkpoint { message } => write!(f, "checkpoint error: {message}"),
            Error::Io { message } => write!(f, "io error: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io { message: e.to_string() }
    }
}
