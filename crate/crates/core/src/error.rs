//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by tensor math, tokenization, model plumbing and file I/O.
#[derive(Debug)]
pub enum Error {
    /// Two tensors (or a tensor and a contract) disagree on shape.
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// A scalar was required (e.g. a loss root for backprop).
    NotScalar { context: &'static str, shape: Vec<usize> },
    /// Catch-all for invalid arguments with a human explanation.
    InvalidArgument { context: &'static str, message: String },
    /// Aspect ratio is not one of the tabulated schedule rows.
    UnknownAspectRatio(f64),
    /// Scale count outside 1..=max for the requested schedule.
    ScaleCountOutOfRange { requested: usize, max: usize },
    /// A loss was asked for with no targets.
    EmptyTargets(&'static str),
    /// An attention query row ended up with no allowed key.
    NoAllowedKey { query: usize },
    /// Student/teacher layer lists differ in length.
    LayerCountMismatch { student: usize, teacher: usize },
    /// No accumulation counts under the cap realize the token ratio.
    InfeasibleRatio { cap: usize },
    /// A named parameter is absent from the parameter set.
    MissingParameter(String),
    /// A gradient was produced for a tensor the plan declared frozen.
    FrozenGradient(String),
    /// A serialized file violated its format contract.
    Format { context: &'static str, message: String },
    /// Unknown selection passed to the verify runner.
    UnknownSelection(String),
    /// A computation produced a non-finite value where finiteness is required.
    NonFinite(&'static str),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, expected, got } => {
                write!(f, "{context}: shape mismatch, expected {expected:?}, got {got:?}")
            }
            Error::NotScalar { context, shape } => {
                write!(f, "{context}: expected a scalar, got shape {shape:?}")
            }
            Error::InvalidArgument { context, message } => write!(f, "{context}: {message}"),
            Error::UnknownAspectRatio(r) => {
                write!(f, "aspect ratio {r} is not in the built-in schedule table")
            }
            Error::ScaleCountOutOfRange { requested, max } => {
                write!(f, "scale count {requested} outside 1..={max}")
            }
            Error::EmptyTargets(ctx) => write!(f, "{ctx}: empty target set"),
            Error::NoAllowedKey { query } => {
                write!(f, "attention query {query} has no allowed key")
            }
            Error::LayerCountMismatch { student, teacher } => {
                write!(f, "layer count mismatch: student {student}, teacher {teacher}")
            }
            Error::InfeasibleRatio { cap } => {
                write!(f, "no accumulation counts <= {cap} realize the token ratio within 10%")
            }
            Error::MissingParameter(name) => write!(f, "missing parameter `{name}`"),
            Error::FrozenGradient(name) => {
                write!(f, "gradient produced for frozen parameter `{name}`")
            }
            Error::Format { context, message } => write!(f, "{context}: {message}"),
            Error::UnknownSelection(s) => write!(f, "unknown verify selection `{s}`"),
            Error::NonFinite(ctx) => write!(f, "{ctx}: non-finite value"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
