//! Crate-wide error type.

use std::fmt;
use std::io;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor construction or operation over incompatible shapes.
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An operation received an empty input where at least one element is required.
    EmptyInput { context: &'static str },
    /// A scalar parameter is outside its valid range.
    InvalidParameter { name: &'static str, message: String },
    /// Class label outside `[0, class_count)`.
    LabelOutOfRange { label: usize, class_count: usize },
    /// A class has too few samples for the requested partition.
    ClassTooSmall {
        class: usize,
        samples: usize,
        clients: usize,
    },
    /// A client ended up with an empty dataset where training requires data.
    EmptyDataset { client: usize },
    /// IDX file does not start with the expected magic number.
    IdxBadMagic { expected: u32, found: u32 },
    /// IDX file ends before the declared payload.
    IdxTruncated { needed: usize, available: usize },
    /// IDX image count differs from label count.
    IdxCountMismatch { images: usize, labels: usize },
    /// Checkpoint file is malformed.
    BadCheckpoint { message: String },
    /// Configuration file problem: unknown key, bad value, missing file.
    Config { message: String },
    /// CSV input could not be parsed.
    CsvParse { line: usize, message: String },
    /// A pipeline stage failed; wraps the underlying error with a stage tag.
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, lhs, rhs } => {
                write!(f, "{context}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::EmptyInput { context } => write!(f, "{context}: empty input"),
            Error::InvalidParameter { name, message } => {
                write!(f, "invalid parameter `{name}`: {message}")
            }
            Error::LabelOutOfRange { label, class_count } => {
                write!(f, "label {label} out of range for {class_count} classes")
            }
            Error::ClassTooSmall {
                class,
                samples,
                clients,
            } => write!(
                f,
                "class {class} has {samples} samples, fewer than {clients} clients"
            ),
            Error::EmptyDataset { client } => {
                write!(f, "client {client} has an empty dataset")
            }
            Error::IdxBadMagic { expected, found } => {
                write!(f, "bad IDX magic: expected {expected:#010x}, found {found:#010x}")
            }
            Error::IdxTruncated { needed, available } => {
                write!(f, "truncated IDX payload: need {needed} bytes, have {available}")
            }
            Error::IdxCountMismatch { images, labels } => {
                write!(f, "IDX count mismatch: {images} images vs {labels} labels")
            }
            Error::BadCheckpoint { message } => write!(f, "bad checkpoint: {message}"),
            Error::Config { message } => write!(f, "config error: {message}"),
            Error::CsvParse { line, message } => {
                write!(f, "CSV parse error at line {line}: {message}")
            }
            Error::Stage { stage, source } => write!(f, "stage `{stage}` failed: {source}"),
            Error::Io(e) => write!(f, "I/O error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Stage { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Tag an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
