use thiserror::Error;

/// Failures while decoding one of the binary artifact formats.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("truncated payload: needed {needed} bytes, {available} available")]
    TruncatedPayload { needed: usize, available: usize },
    #[error("non-finite value in {field} at element {index}")]
    NonFinite { field: &'static str, index: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

impl FormatError {
    /// Stable numeric code for each failure class.
    pub fn code(&self) -> u32 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::VersionMismatch { .. } => 2,
            FormatError::UnsupportedDtype(_) => 3,
            FormatError::TruncatedPayload { .. } => 4,
            FormatError::NonFinite { .. } => 5,
            FormatError::TrailingBytes(_) => 6,
            FormatError::InvalidHeader(_) => 7,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(#[from] FormatError),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index fingerprint does not match the embedding table")]
    FingerprintMismatch,
    #[error("index mode {0} does not support this operation")]
    ModeMismatch(&'static str),
    #[error("oracle violation at step {step}: {detail}")]
    OracleViolation { step: usize, detail: String },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
