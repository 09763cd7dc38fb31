use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dimension too small: {0:?} (need at least 2 voxels per axis)")]
    DimensionTooSmall([usize; 3]),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("interior distance transform needs at least one background voxel")]
    EmptyBackground,
    #[error("exterior distance transform needs at least one foreground voxel")]
    EmptyForeground,
    #[error("grid with {0} voxels exceeds the brute-force oracle limit of 32^3")]
    GridTooLarge(usize),
    #[error("matrix is not orientation preserving (det = {0})")]
    NonOrientationPreserving(f64),
    #[error("grid extents differ by more than one coarse voxel")]
    ExtentMismatch,
    #[error("objective is not finite ({0})")]
    NonFiniteObjective(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no landmark ids in common")]
    NoCommonLandmarks,

    #[error("{path}: missing header key {key}")]
    MissingKey { path: PathBuf, key: String },
    #[error("{path}: unsupported element type {ty}")]
    UnsupportedElementType { path: PathBuf, ty: String },
    #[error("{path}: payload has {actual} bytes, header implies {expected}")]
    PayloadSizeMismatch { path: PathBuf, expected: usize, actual: usize },
    #[error("{path}: TransformMatrix is not orthonormal")]
    NonOrthonormalDirection { path: PathBuf },
    #[error("{path}: malformed header line {line}: {msg}")]
    MalformedHeader { path: PathBuf, line: usize, msg: String },
    #[error("duplicate landmark id {0}")]
    DuplicateId(String),
    #[error("{path}: malformed line {line}: {msg}")]
    MalformedLine { path: PathBuf, line: usize, msg: String },
    #[error("{path}: expected 16 numbers, found {count}")]
    WrongCount { path: PathBuf, count: usize },
    #[error("{path}: bottom row must be 0 0 0 1")]
    BadBottomRow { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteObjective(_) => 3,
            Error::InvalidArgument(_) => 1,
            _ => 2,
        }
    }
}
