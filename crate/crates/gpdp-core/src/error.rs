use alloc::string::String;
use core::fmt;

/// Errors surfaced by the core algorithms.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands had incompatible dimensions.
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// A parameter violated its documented bound.
    InvalidParam(String),
    /// An input or intermediate value was NaN or infinite.
    NonFinite(&'static str),
    /// The kernel matrix stayed indefinite after jitter escalation.
    CholeskyFailure { size: usize, pivot: usize },
    /// A diffusion step index fell outside `1..=N`.
    StepOutOfRange { step: usize, n: usize },
    /// An operation that needs data was given none.
    EmptyDataset,
    /// A serialized blob did not match the expected layout.
    Decode(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                context,
                expected,
                got,
            } => write!(f, "{context}: expected dimension {expected}, got {got}"),
            Error::InvalidParam(msg) => write!(f, "invalid parameter: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::CholeskyFailure { size, pivot } => write!(
                f,
                "Cholesky factorization of {size}x{size} matrix failed at pivot {pivot}"
            ),
            Error::StepOutOfRange { step, n } => {
                write!(f, "diffusion step {step} outside 1..={n}")
            }
            Error::EmptyDataset => write!(f, "operation requires a non-empty dataset"),
            Error::Decode(what) => write!(f, "malformed payload: {what}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
