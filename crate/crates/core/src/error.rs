use std::io;

use thiserror::Error;

/// Errors raised by the inference engine and its analyses.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("budget error: requested {requested} tokens but only {available} are available")]
    Budget { requested: usize, available: usize },

    #[error("bounds error: index {index} out of range for length {len}")]
    Bounds { index: usize, len: usize },

    #[error("state error: {0}")]
    State(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
