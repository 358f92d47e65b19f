//! Numeric core: a reverse-mode autodiff tape and just enough dense linear
//! algebra to run Riccati recursions and KKT solves on top of it.
//!
//! Everything downstream (dynamics, the MPC solver, the IMU network) is
//! written against the [`Scalar`] trait so the same expression code runs
//! either on plain `f64` (fast path, no recording) or on tape-backed
//! [`Var`] values when gradients are needed.

mod linalg;
mod scalar;
pub mod so3;
mod tape;

pub use linalg::{cholesky, solve_linear, solve_linear_mat, Matrix};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

/// Errors surfaced by the numeric core.
///
/// Shape mismatches and cross-tape mixing are programming errors and panic
/// instead; only data-dependent failures travel through `Result`.
#[derive(Debug, Error)]
pub enum MathError {
    /// LU elimination found no usable pivot: the matrix is singular (or
    /// near-singular) at the named elimination row.
    #[error("singular matrix: pivot {pivot:.3e} below threshold at elimination row {row}")]
    Singular { row: usize, pivot: f64 },
    /// Cholesky factorization hit a non-positive diagonal: the matrix is
    /// not positive semidefinite within tolerance.
    #[error("matrix not positive semidefinite: diagonal {value:.3e} at row {row}")]
    NotPsd { row: usize, value: f64 },
}
