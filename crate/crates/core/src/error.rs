use alloc::string::String;
use core::fmt;

use crate::race::RaceClass;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A source race code that the mapping configuration does not declare.
    UnknownSourceCode(String),
    /// A value violates a domain invariant (distribution sums, geoid shape, deciles).
    Invariant(String),
    /// Malformed tabular input; `row` is 1-based and counts data rows.
    Parse { row: usize, message: String },
    DuplicateGeoid(String),
    InvalidMarginal,
    MissingFirstNamePrior,
    EmptyLastName,
    MissingLabel(String),
    ShapeMismatch { expected: usize, found: usize, what: &'static str },
    NonFiniteLoss { epoch: usize, batch: usize },
    InvalidEpsilon,
    InvalidConfig(String),
    DegenerateLabels(RaceClass),
    LengthMismatch { preds: usize, labels: usize },
    Empty,
    UnsortedBinEdges,
    OutOfSupport(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::UnknownSourceCode(code) => write!(f, "unknown source race code {code:?}"),
            Error::Invariant(msg) => write!(f, "invariant violated: {msg}"),
            Error::Parse { row, message } => write!(f, "parse error at row {row}: {message}"),
            Error::DuplicateGeoid(g) => write!(f, "duplicate tract geoid {g}"),
            Error::InvalidMarginal => f.write_str("marginal distribution must be strictly positive"),
            Error::MissingFirstNamePrior => f.write_str("first-name prior required for BIFSG"),
            Error::EmptyLastName => f.write_str("last name is empty after normalization"),
            Error::MissingLabel(id) => write!(f, "record {id} has no label"),
            Error::ShapeMismatch { expected, found, what } => {
                write!(f, "shape mismatch for {what}: expected {expected}, found {found}")
            }
            Error::NonFiniteLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            Error::InvalidEpsilon => f.write_str("finite-difference epsilon must be positive"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::DegenerateLabels(c) => write!(f, "only one class present in labels ({c})"),
            Error::LengthMismatch { preds, labels } => {
                write!(f, "{preds} predictions but {labels} labels")
            }
            Error::Empty => f.write_str("empty input"),
            Error::UnsortedBinEdges => f.write_str("income bin edges must be strictly increasing"),
            Error::OutOfSupport(msg) => write!(f, "input outside generator support: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
extern crate std;

#[cfg(feature = "std")]
impl std::error::Error for Error {}
