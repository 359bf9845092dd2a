use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward already ran on this tape; build a new tape for the next pass")]
    BackwardTwice,

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: String, detail: String },

    #[error("singular system (reciprocal condition estimate {rcond:e}): {detail}")]
    Singular { rcond: f64, detail: String },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("dataset error for clip `{clip_id}`: {detail}")]
    Dataset { clip_id: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` is stale: recorded config hash {recorded:016x}, current {current:016x}")]
    StaleConfig {
        stage: String,
        recorded: u64,
        current: u64,
    },

    #[error("stage `{stage}` state verification failed for {}: recorded hash {recorded:016x}, found {found:016x}", path.display())]
    StateVerification {
        stage: String,
        path: PathBuf,
        recorded: u64,
        found: u64,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
