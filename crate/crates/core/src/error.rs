use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the keyword-spotting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Usage(String),

    #[error("clip of {len} samples is shorter than one {window}-sample window")]
    ClipTooShort { len: usize, window: usize },

    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),

    #[error("unsupported wav: {0}")]
    UnsupportedWav(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("keyword {0:?} belongs to no split")]
    UnassignedKeyword(String),

    #[error("keyword {0:?} has no enrolled prototype")]
    MissingPrototype(String),

    #[error("stale activation cache: cache from generation {cache}, parameters at {params}")]
    StaleCache { cache: u64, params: u64 },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("malformed {what} at line {line}: {message}")]
    Malformed {
        what: &'static str,
        line: usize,
        message: String,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable category used by the CLI diagnostic prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch { .. } => "dimension",
            Error::ZeroNorm(_) => "zero-norm",
            Error::NonFinite(_) => "non-finite",
            Error::Empty(_) => "empty",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Usage(_) => "usage",
            Error::ClipTooShort { .. } => "clip-too-short",
            Error::SampleRateMismatch(..) => "sample-rate",
            Error::UnsupportedWav(_) => "unsupported-wav",
            Error::InsufficientData(_) => "insufficient-data",
            Error::UnassignedKeyword(_) => "unassigned-keyword",
            Error::MissingPrototype(_) => "missing-prototype",
            Error::StaleCache { .. } => "stale-cache",
            Error::IncompatibleCheckpoint(_) => "incompatible-checkpoint",
            Error::Malformed { .. } => "malformed",
            Error::Format(_) => "format",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
