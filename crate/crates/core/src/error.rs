use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(String),

    #[error("ragged row {row}: expected {expected} columns, found {found}")]
    RaggedRow {
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("row {row}, column {column}: cannot parse {value:?} as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("row {row}: invalid label {value:?} (labels must be non-negative integers)")]
    InvalidLabel { row: usize, value: String },

    #[error("label column {0:?} not found in header")]
    MissingLabelColumn(String),

    #[error("empty dataset: {0}")]
    Empty(String),

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("topology has no trainable block")]
    NoTrainableBlock,

    #[error("topology already has an unfrozen block")]
    UnfrozenBlock,

    #[error("topology has no hidden layer")]
    NoLayer,

    #[error("empty subset")]
    EmptySubset,

    #[error("too few points for clustering: {points} points, {clusters} clusters")]
    TooFewPoints { points: usize, clusters: usize },

    #[error("all {0} hyperparameter candidates failed; first error: {1}")]
    AllCandidatesFailed(usize, Box<Error>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
