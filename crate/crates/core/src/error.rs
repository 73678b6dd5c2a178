use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the extraction toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("I/O error on {path}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensions: {0}")]
    Dimension(String),
    #[error("degenerate affine: {0}")]
    DegenerateAffine(String),
    #[error("zero variance: intensities are constant")]
    ZeroVariance,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad magic: expected \"HDBW\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported weight file version {0}")]
    VersionUnsupported(u32),
    #[error("weight header inconsistent with payload: {0}")]
    ShapeHeaderMismatch(String),
    #[error("need at least {needed} cases for {needed}-fold split, got {got}")]
    TooFewCases { needed: usize, got: usize },
    #[error("ensemble has no members")]
    EmptyEnsemble,
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("mask is empty; distance undefined")]
    EmptyMask,
    #[error("no matching cases found")]
    NoMatchingCases,
    #[error("empty input")]
    EmptyInput,
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("missing data in row {0}; complete blocks are required (Skillings-Mack is not supported)")]
    MissingData(usize),
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::IoAt {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
