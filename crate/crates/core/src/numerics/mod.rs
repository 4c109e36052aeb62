//! Dense linear algebra, probability helpers and the symmetric eigensolver
//! the rest of the crate is built on. Everything here is a pure function.

mod eig;
mod matrix;
mod prob;

pub use eig::{symmetric_eig, SymmetricEigen, SYMMETRY_TOLERANCE};
pub use matrix::{dot, kahan_sum, norm, Matrix};
pub use prob::{kl_divergence, log_softmax, softmax, softmax_backward, Distribution, KL_FLOOR};

