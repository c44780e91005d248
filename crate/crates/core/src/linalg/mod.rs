//! Dense linear-algebra kernels.
//!
//! Everything here is a pure function of its inputs: identical input bits
//! produce identical output bits, and nothing holds shared mutable state.
//!
//! - [`qr_decompose`]: thin Householder QR with a non-negative `R` diagonal.
//! - [`exact_svd`]: one-sided (Hestenes) Jacobi SVD, preceded by a QR
//!   reduction for tall inputs. Used directly as the reference
//!   decomposition and inside the randomized path.
//! - [`randomized_svd`]: single-pass Gaussian sketch, QR range finder,
//!   projection and small exact SVD.

mod matrix;
mod qr;
mod random;
mod rsvd;
mod svd;

pub use matrix::Matrix;
pub(crate) use matrix::dot;
pub use qr::{qr_decompose, QrFactors};
pub use random::standard_normal_sample;
pub use rsvd::randomized_svd;
pub use svd::{exact_svd, SvdFactors, MAX_JACOBI_SWEEPS};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    DimensionMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length mismatch: expected {expected}, got {got}")]
    InvalidData { expected: usize, got: usize },
    #[error("{context}: non-finite value at ({row}, {col})")]
    NonFinite {
        context: &'static str,
        row: usize,
        col: usize,
    },
    #[error("QR needs rows >= cols, got {rows}x{cols}")]
    WideQr { rows: usize, cols: usize },
    #[error("empty matrix ({rows}x{cols})")]
    Empty { rows: usize, cols: usize },
    #[error("sketch size {sketch} outside 1..={max}")]
    SketchSize { sketch: usize, max: usize },
    #[error("Jacobi SVD did not converge after {sweeps} sweeps")]
    NotConverged { sweeps: usize },
}
