//! Deterministic random sampling and the small dense linear-algebra kernel
//! used by every other module.
//!
//! All arithmetic is 64-bit; matrices are `nalgebra` heap matrices. Sampling
//! operations are pure functions of an [`RngStream`] descriptor and their
//! arguments, so identical `(seed, stream_id)` pairs reproduce identical
//! values on any platform and under any degree of parallelism.

mod linalg;
mod rng;
pub mod serde_helpers;

pub(crate) use linalg::{gaussian_matrix_from, gaussian_vector_from};
pub use linalg::{
    ridge_solve, sample_gaussian_matrix, sample_gaussian_vector, sample_spd, spd_inverse,
    spd_sqrt, SpdMatrix,
};
pub use rng::RngStream;

use thiserror::Error;

/// Errors from the linear-algebra kernel.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid eigenvalue range: need 0 < eig_min <= eig_max, got [{eig_min}, {eig_max}]")]
    InvalidEigenvalueRange { eig_min: f64, eig_max: f64 },
    #[error("matrix is not symmetric: relative asymmetry {asymmetry:.3e} exceeds 1e-12")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive-definite: minimum eigenvalue {min_eig:.3e}")]
    NotPositiveDefinite { min_eig: f64 },
    #[error("matrix entries are not finite")]
    NonFinite,
    #[error("numerically singular: condition estimate {condition:.3e} exceeds 1e12")]
    NumericallySingular { condition: f64 },
    #[error("singular normal equations: lambda = 0 and X'X is rank-deficient")]
    SingularNormalEquations,
    #[error("invalid ridge penalty: lambda = {lambda} must be >= 0")]
    NegativeLambda { lambda: f64 },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
}
