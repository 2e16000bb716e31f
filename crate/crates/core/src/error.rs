use std::path::PathBuf;

/// Errors produced anywhere in the sensing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// The operation is undefined for the current state (untrained model,
    /// graph without labels, isolated node, ...).
    #[error("invalid state: {0}")]
    State(String),

    /// A numerical routine produced a non-finite value.
    #[error("numeric failure at iteration {iteration}: {message}")]
    Numeric { iteration: usize, message: String },

    /// A file did not match its expected format.
    #[error("{location}: {message}")]
    Format { location: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("timestamp {timestamp}: {source}")]
    AtTimestamp {
        timestamp: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn format(location: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            location: location.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
