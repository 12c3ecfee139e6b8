//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("i/o error at {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // NIfTI
    #[error("not a NIfTI-1 file: {0}")]
    BadMagic(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated payload: header promises {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("non-positive voxel spacing {0:?}")]
    NonPositiveSpacing([f64; 3]),
    #[error("invalid NIfTI header: {0}")]
    InvalidHeader(String),
    #[error("label file contains non-integer value {0}")]
    NonIntegerLabels(f64),
    #[error("value {value} does not fit datatype code {datatype}")]
    ValueOutOfRange { value: f64, datatype: i16 },

    // image core
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("bounding box is empty after clamping")]
    EmptyBox,
    #[error("affine transform is not invertible")]
    DegenerateAffine,
    #[error("image is constant")]
    ConstantImage,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    // hips
    #[error("no foreground above the background cutoff")]
    NoForeground,
    #[error("histogram landmarks are not strictly increasing: {0:?}")]
    NonMonotoneLandmarks(Vec<f64>),
    #[error("duplicate source landmark at {0}")]
    DuplicateSourceLandmark(f64),
    #[error("polynomial fit is ill-conditioned (condition estimate {0:e})")]
    IllConditioned(f64),

    // fusion
    #[error("no atlas votes supplied")]
    EmptyVoteSet,

    // atlas
    #[error("atlas needs at least one prior")]
    EmptyPriorSet,
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(PathBuf),
    #[error("label dictionary conflict: {0}")]
    DictionaryConflict(String),
    #[error("malformed bundle file {path}: {reason}")]
    MalformedBundle { path: PathBuf, reason: String },
    #[error("atlas prior {0} has no precomputed warp to the template")]
    AtlasNotPrecomputed(String),

    // eval
    #[error("paired lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least two priors for leave-one-out, found {0}")]
    TooFewPriors(usize),

    #[error("png encoding failed: {0}")]
    Png(String),
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path.into());
        }
        Error::IoAt {
            path: path.into(),
            source,
        }
    }
}
