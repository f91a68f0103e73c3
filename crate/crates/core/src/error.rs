//! Error type shared by every module in the crate.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, CoreError>;

/// All failure modes surfaced by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Two tensor shapes are incompatible for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An argument is outside its documented domain (bad ratio, bad axis,
    /// empty input, unsupported variant combination, ...).
    Invalid(String),
    /// A computation produced NaN or infinity where a finite value is required.
    NonFinite(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "shape mismatch in {op}: {lhs:?} vs {rhs:?}")
            }
            CoreError::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            CoreError::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
        }
    }
}

impl CoreError {
    /// Shorthand for [`CoreError::Invalid`] from anything displayable.
    pub fn invalid(msg: impl fmt::Display) -> Self {
        CoreError::Invalid(alloc::format!("{msg}"))
    }
}
