use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("invalid value {value:?} for {field}")]
    InvalidEnum { field: &'static str, value: String },

    #[error("record {id:?}: {message}")]
    InvalidRecord { id: String, message: String },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: String, found: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("k={k} out of range for {points} points")]
    KOutOfRange { k: usize, points: usize },

    #[error("non-finite embedding value for {0:?}")]
    NonFinite(String),

    #[error("requested {requested} records but the pool holds {available}")]
    PoolTooSmall { requested: usize, available: usize },

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("empty crop: {0}")]
    EmptyCrop(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    /// Short stable identifier, used for machine-readable CLI errors and FFI status codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::DuplicateId(_) => "duplicate-id",
            Error::InvalidEnum { .. } => "invalid-enum",
            Error::InvalidRecord { .. } => "invalid-record",
            Error::MagicMismatch { .. } => "magic-mismatch",
            Error::UnsupportedVersion(_) => "unsupported-version",
            Error::Truncated(_) => "truncated-file",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::ShapeMismatch(_) => "shape-mismatch",
            Error::KOutOfRange { .. } => "k-out-of-range",
            Error::NonFinite(_) => "non-finite",
            Error::PoolTooSmall { .. } => "size-exceeds-pool",
            Error::UnknownId(_) => "unknown-id",
            Error::EmptyCrop(_) => "empty-crop",
            Error::EmptyDataset => "empty-dataset",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Image { .. } => "image",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
