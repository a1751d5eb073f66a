use thiserror::Error;

/// Errors produced by the sparse labeling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("center out of bounds: ({x}, {y}) outside {width}x{height}")]
    CenterOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient usable patches: need {needed}, found {found}")]
    InsufficientPatches { needed: usize, found: usize },
    #[error("stale gram cache: fingerprint {cache:016x} does not match dictionary {dict:016x}")]
    StaleGramCache { cache: u64, dict: u64 },
    #[error("no positive samples")]
    NoPositiveSamples,
    #[error("missing dictionary for path `{0}`")]
    MissingDictionary(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("png decoding failed: {0}")]
    Png(#[from] png::DecodingError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
