use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite forward")]
    NonFinite,

    #[error("target too long: {target} labels cannot be aligned in {frames} frames")]
    TargetTooLong { target: usize, frames: usize },

    #[error("class id {id} out of range for {classes} classes")]
    ClassOutOfRange { id: usize, classes: usize },

    #[error("utterance too short: {frames} frames, need at least {min}")]
    TooShort { frames: usize, min: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("missing context: {0}")]
    MissingContext(&'static str),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("config error at {location}: {message}")]
    Config { location: String, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
