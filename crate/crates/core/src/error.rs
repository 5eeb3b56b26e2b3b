use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("power iteration did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("mixing matrix is not symmetric")]
    NotSymmetric,

    #[error("{what}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("{what}: truncated input (need {needed} bytes, have {available})")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config: unknown key `{0}`")]
    UnknownKey(String),

    #[error("config: invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },

    #[error("topology is disconnected (n = {n_clients}, p = {p})")]
    Disconnected { n_clients: usize, p: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(key: &str, message: impl Into<String>) -> Self {
        Error::InvalidValue {
            key: key.to_string(),
            message: message.into(),
        }
    }
}
