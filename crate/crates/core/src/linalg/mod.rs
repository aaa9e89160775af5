//! Dense and sparse kernels plus truncated SVD.

mod dense;
mod elementwise;
mod qr;
mod sparse;
mod svd;

pub use dense::{dot, sum, DenseMatrix};
pub use elementwise::exp_in_place;
pub use qr::qr_orthonormalize;
pub use sparse::CsrMatrix;
pub use svd::{approx_svd, approx_svd_calls, exact_svd_dense, ApproxSvdParams, Side, SvdFactors, EXACT_SVD_MAX_DIM};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    DimensionMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },
}
