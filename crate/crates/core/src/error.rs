use std::path::PathBuf;

use thiserror::Error;

use crate::bundle::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{file}: expected {expected} bytes ({rows} x {cols} binary32), found {actual}")]
    SizeMismatch {
        file: String,
        rows: usize,
        cols: usize,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported bundle format_version {0} (expected 1)")]
    UnsupportedVersion(u32),

    #[error("malformed {file}: {message}")]
    Format { file: String, message: String },

    #[error("invalid bundle: {0}")]
    Invalid(Violation),

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, found {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("caption count {requested} out of range 1..={available}")]
    CaptionCount { requested: usize, available: usize },

    #[error("invalid fusion weights: {0}")]
    InvalidWeights(String),

    #[error("no enabled {0} channel")]
    NoChannel(&'static str),

    #[error("k = {k} out of range 1..={max}")]
    KOutOfRange { k: usize, max: usize },

    #[error("no gallery items left after exclusions")]
    EmptyGallery,

    #[error("empty candidate subset")]
    EmptySubset,

    #[error("gallery index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("{rankings} rankings for {annotations} annotated queries")]
    CountMismatch { rankings: usize, annotations: usize },

    #[error("query {query} has no subset annotation")]
    MissingSubset { query: usize },

    #[error("categories {0} and {1} overlap")]
    OverlappingCategories(String, String),

    #[error("query {query}: {source}")]
    Query {
        query: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration incompatible with bundle: {0}")]
    Incompatible(String),

    #[error("invalid sweep grid: {0}")]
    InvalidGrid(String),

    #[error("synthetic bundle refused: {0}")]
    SynthRefused(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_query(self, query: usize) -> Self {
        Error::Query {
            query,
            source: Box::new(self),
        }
    }

    /// True for failures to read, write or parse on-disk data. A bundle that
    /// parses but breaks an invariant (`Invalid`) is a domain error.
    pub fn is_storage(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::MissingFile(_)
                | Error::SizeMismatch { .. }
                | Error::UnsupportedVersion(_)
                | Error::Format { .. }
        )
    }
}
