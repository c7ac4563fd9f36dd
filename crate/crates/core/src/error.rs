use thiserror::Error;

/// Errors raised by the numerical and protocol code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("category id {id} out of range 1..={max}")]
    CategoryRange { id: u32, max: u32 },

    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised while decoding or encoding the on-disk formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    Version(u8),

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("non-finite value at element {0}")]
    NonFinite(usize),

    #[error("invalid header: {0}")]
    Header(String),

    #[error("line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
