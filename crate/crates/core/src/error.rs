use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or input value violates a documented bound.
    #[error("validation error: {0}")]
    Validation(String),

    /// Array or tensor shapes disagree.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A computation left its numerical domain (log of a nonpositive value, NaN, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An operation was called on an object in the wrong state.
    #[error("state error: {0}")]
    State(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable kind tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Dimension(_) => "dimension",
            Error::Numerical(_) => "numerical",
            Error::State(_) => "state",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

pub(crate) fn dimension<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
