use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at {location}: {detail}")]
    Shape { location: String, detail: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("numeric abort: {0}")]
    Numeric(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Shape {
            location: location.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
