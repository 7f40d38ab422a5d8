use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not a rotation: max deviation {deviation:.3e} exceeds {tolerance:.1e}")]
    NotARotation { deviation: f64, tolerance: f64 },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("trajectory needs at least {required} poses, got {actual}")]
    TooFewPoses { required: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token {token} at offset {offset} is outside [0, {max}]")]
    TokenOutOfRange { token: u32, offset: usize, max: u32 },

    #[error("malformed token sequence at offset {offset}: {reason}")]
    MalformedTokens { offset: usize, reason: String },

    #[error("token sequence contains no poses")]
    EmptyTrajectory,

    #[error("not enough samples for {metric}: need at least {required}, got {actual}")]
    TooFewSamples { metric: &'static str, required: usize, actual: usize },

    #[error("{0}")]
    Model(String),

    #[error("training aborted: {invalid} of {total} records could not be encoded")]
    TooManyInvalidRecords { invalid: usize, total: usize, details: Vec<String> },

    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid { what, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(location: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse { location: location.into(), reason: reason.into() }
    }
}
