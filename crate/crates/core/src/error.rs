//! Error type shared by every module.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors raised by tensor, pairing, attention and model operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    Shape {
        /// Operation that rejected its operands.
        op: &'static str,
        /// Shape of the left (or only) operand.
        lhs: Vec<usize>,
        /// Shape of the right operand, or the expected shape.
        rhs: Vec<usize>,
    },
    /// An index fell outside `0..bound`, or was repeated.
    Index {
        /// Offending index.
        index: usize,
        /// Exclusive upper bound.
        bound: usize,
    },
    /// The greedy pairing scan could not place every frame.
    PairingInfeasible {
        /// Clip length.
        frames: usize,
        /// Skip step.
        step: usize,
    },
    /// Invalid model, shift or pyramid configuration.
    Config(String),
    /// A finite-difference probe produced a non-finite loss.
    NonFinite {
        /// Flat coordinate that was being perturbed.
        coordinate: usize,
    },
    /// Two cost reports differ outside the attention tallies.
    Comparison(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Index { index, bound } => {
                write!(f, "index {index} out of range or repeated (bound {bound})")
            }
            Error::PairingInfeasible { frames, step } => {
                write!(f, "cannot pair {frames} frames with skip step {step}")
            }
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NonFinite { coordinate } => {
                write!(
                    f,
                    "non-finite loss while perturbing coordinate {coordinate}"
                )
            }
            Error::Comparison(msg) => write!(f, "reports are not comparable: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

/// Result alias used across the crate.
pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
