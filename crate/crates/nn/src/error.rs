use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    /// Shape mismatch in an op; names the op and the offending axes/shapes.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl NnError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NnError::Shape { op, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, NnError>;
