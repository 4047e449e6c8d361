use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape error: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: invalid configuration: {detail}")]
    Config { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Config { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
