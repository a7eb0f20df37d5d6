//! Dense `f64` kernels: thin SVD, Cholesky, triangular solves, norms.

mod cholesky;
mod matrix;
mod svd;
mod triangular;

pub use cholesky::{check_symmetric, cholesky_factor, SYMMETRY_TOLERANCE};
pub use matrix::{dot, frobenius_norm, Matrix};
pub use svd::{singular_values, svd, truncated_svd, SvdResult};
pub use triangular::{triangular_solve, Side, Triangle};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("matrix contains non-finite values")]
    NonFinite,
    #[error("rank {k} outside 1..={max}")]
    RankOutOfRange { k: usize, max: usize },
    #[error("matrix is not symmetric (relative deviation {deviation:.3e})")]
    NotSymmetric { deviation: f64 },
    #[error("non-positive pivot {pivot:.3e} at index {index}")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error(
        "singular triangular factor: diagonal[{index}] = {value:.3e} (condition ≈ {condition:.3e})"
    )]
    SingularTriangular {
        index: usize,
        value: f64,
        condition: f64,
    },
    #[error("jacobi svd did not converge in {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
}
