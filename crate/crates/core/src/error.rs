use crate::seqcodec::ParseError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A precondition on shapes, ranges or values was violated.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("token stream rejected: {0}")]
    Parse(#[from] ParseError),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("stage `{stage}` requires {what}")]
    MissingPrerequisite { stage: String, what: String },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Domain(msg.into()))
}
