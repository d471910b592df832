//! Crate-wide error type.
//!
//! A single enum keeps `Result` plumbing simple across subsystem boundaries;
//! [`Error::is_user_error`] is what the CLI uses to map failures onto its
//! exit-code contract (2 = validation/user error, 3 = runtime numerical
//! failure).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, naming both operands.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A value outside its valid range, e.g. `eps <= 0` or an odd spatial
    /// dimension fed to a 2x2 pool.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An index outside its container, e.g. a class label >= Q.
    #[error("index out of range: {0}")]
    Index(String),

    /// Degenerate scene geometry (UAV at the BS, behind the camera, ...).
    #[error("geometry error: {0}")]
    Geometry(String),

    /// A non-finite value surfaced where the math guarantees finiteness on
    /// finite inputs — gradient blow-up, NaN loss.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed dataset or checkpoint bytes.
    #[error("format error: {0}")]
    Format(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by bad input (config, format, geometry, index),
    /// false for runtime numerical failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Numerical(_))
    }
}
