use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch { op: &'static str, left: String, right: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value {value} while evaluating perturbed index {index}")]
    NonFiniteAtIndex { index: usize, value: f64 },

    #[error("non-finite {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },

    /// A backward pass was requested for a value that was never recorded.
    #[error("backward requested for node {node} but the tape only holds {recorded} recorded nodes")]
    NoForward { node: usize, recorded: usize },

    #[error("mask value {value} at index {index} is not 0 or 1")]
    NonBinaryMask { index: usize, value: f64 },

    #[error("pooled ground truth has no {missing} pixels; AUC is undefined")]
    DegenerateLabels { missing: &'static str },

    #[error("could not place a manipulation region after {tries} attempts")]
    PlacementFailed { tries: usize },

    #[error("image of {height}x{width} is below the minimum size {min}x{min}")]
    TooSmall { height: usize, width: usize, min: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("corrupt checkpoint at byte offset {offset}: {reason}")]
    CorruptCheckpoint { offset: usize, reason: String },

    #[error("config error at line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::ShapeMismatch { op, left: left.to_string(), right: right.to_string() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

/// Process exit status for usage and configuration problems.
pub const EXIT_USAGE: i32 = 2;
/// Process exit status for non-finite numerics.
pub const EXIT_NUMERIC: i32 = 3;
/// Process exit status for unreadable model artifacts.
pub const EXIT_CORRUPT: i32 = 4;

impl Error {
    /// Exit status the command-line tool reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::NonFiniteAtIndex { .. } => EXIT_NUMERIC,
            Error::BadMagic { .. } | Error::CorruptCheckpoint { .. } => EXIT_CORRUPT,
            _ => EXIT_USAGE,
        }
    }
}
