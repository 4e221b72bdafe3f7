//! Dense arrays, symmetric eigendecomposition, reverse-mode gradients.

mod eig;
pub mod gradcheck;
mod matrix;
mod tape;

pub use eig::{sym_eig, EigenResult, MAX_SWEEPS, OFF_DIAGONAL_TOL};
pub use gradcheck::finite_diff_check;
pub use matrix::{Matrix, Scalar};
pub use tape::{Gradients, Segment, Tape, Var};
