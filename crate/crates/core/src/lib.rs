//! Federated LoRA aggregation.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: dense matrix kernels (Householder QR, Jacobi SVD, randomized SVD).
//! - [`lora`]: low-rank adapters, forward pass, analytic gradients, merging.
//! - [`aggregation`]: the SVD-based momentum-preserving aggregator and the
//!   five baselines it is compared against, plus communication accounting.
//! - [`fedsim`]: a synthetic teacher–student regression task, Dirichlet
//!   partitioning, local training and the round orchestrator.
//! - [`metrics`]: spectrum analytics, trajectory PCA and report export.

pub mod linalg;
pub mod rng;

pub use linalg::{LinalgError, Matrix};
pub mod aggregation;
pub mod lora;
pub mod fedsim;
pub mod metrics;
