use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no correlation sample above the detection threshold")]
    EmptyProfile,

    #[error("{algorithm} needs at least {needed} gateway measurements, got {got}")]
    InsufficientMeasurements {
        algorithm: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("degenerate gateway geometry: normal equations are singular")]
    DegenerateGeometry,

    #[error("truncated IQ data: {len} bytes is not a multiple of 8")]
    TruncatedIq { len: usize },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
