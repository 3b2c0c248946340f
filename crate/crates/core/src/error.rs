use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("length error: expected {expected} bytes of payload, found {found}")]
    Length { expected: usize, found: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("version error: expected schema version {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("empty model: {0}")]
    EmptyModel(String),

    #[error("label {label} is not covered by the class statistics ({classes} classes)")]
    UnknownClass { label: i32, classes: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}
