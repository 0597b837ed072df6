//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the pipeline.
///
/// The CLI maps these onto exit codes, so the split between
/// configuration-shaped problems (`Config`, `Size`, `Input`, `Lookup`, `Io`)
/// and data-shaped problems (`Parse`, `Validation`, `Schema`) is load-bearing.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Filesystem failure, tagged with the path involved.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A serialized record could not be parsed.
    #[error("malformed record: {0}")]
    Parse(String),

    /// A record violated one of its type invariants.
    #[error("invalid {field}: {msg}")]
    Validation { field: String, msg: String },

    /// The file-level schema is inconsistent (e.g. mixed evidence kinds).
    #[error("schema error: {0}")]
    Schema(String),

    /// Bad configuration value or mismatched configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A requested split size cannot be satisfied.
    #[error("size error: {0}")]
    Size(String),

    /// A numeric or structural input is out of the operation's domain.
    #[error("input error: {0}")]
    Input(String),

    /// A prompt or response is absent from a model's vocabulary.
    #[error("lookup error: {0}")]
    Lookup(String),

    /// Wraps a data error with the 1-based line it came from.
    #[error("line {line}: {source}")]
    AtLine {
        line: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn at_line(line: usize, source: Error) -> Self {
        Error::AtLine {
            line,
            source: Box::new(source),
        }
    }

    /// Whether this describes bad data (as opposed to bad configuration or
    /// environment). Line-wrapped errors defer to the wrapped error.
    pub fn is_data_error(&self) -> bool {
        match self {
            Error::Parse(_) | Error::Validation { .. } | Error::Schema(_) => true,
            Error::AtLine { source, .. } => source.is_data_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
