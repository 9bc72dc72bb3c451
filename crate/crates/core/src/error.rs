use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// The operation does not apply to this key's scheme.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data is empty or malformed.
    #[error("data error: {0}")]
    Data(String),

    /// The statistic is not defined for this input (e.g. an empty sequence).
    #[error("undefined: {0}")]
    Undefined(String),

    /// A divergence was requested outside the support of its reference.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {msg}")]
    Parse { what: String, msg: String },
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, msg: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            msg: msg.to_string(),
        }
    }
}
