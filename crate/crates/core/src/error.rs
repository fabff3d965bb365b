use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors surfaced by every layer of the crate.
///
/// Variants split into *validation* failures (bad input, bad configuration,
/// corrupt files) and *runtime* failures (numerical breakdown, I/O). The CLI
/// maps the two families to different exit codes, see [`Error::is_validation`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("index {index} out of range for length {len} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("gradient requested for a tensor that does not require grad")]
    Detached,

    #[error("empty graph: {0}")]
    EmptyGraph(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    /// Problems with several input files, one line each.
    #[error("{} invalid input(s):\n{}", .0.len(), .0.join("\n"))]
    InvalidInputs(Vec<String>),

    #[error("{} failure(s):\n{}", .0.len(), .0.join("\n"))]
    Aggregate(Vec<String>),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        source_name: impl Into<String>,
        location: impl Into<String>,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            source_name: source_name.into(),
            location: location.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the caller's input rather than by the run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidArgument(_)
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::InvalidInputs(_)
            | Error::MissingFile(_)
            | Error::EmptyDataset
            | Error::EmptyGraph(_)
            | Error::IndexOutOfRange { .. }
            | Error::Shape { .. } => true,
            Error::Aggregate(_)
            | Error::NonFinite { .. }
            | Error::NonScalarLoss(_)
            | Error::Detached
            | Error::Io { .. } => false,
        }
    }
}
