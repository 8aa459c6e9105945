//! Differentiable KL trust-region projection for sparse categorical distributions.
//!
//! The crate is organised bottom-up:
//!
//! - [`logspace`]: stable log-sum-exp / log-softmax helpers.
//! - [`sparse_dist`]: sparse categorical distributions with a default mass for
//!   dropped tokens, top-K / cumulative-mass sparsification, KL and entropy on
//!   sparse supports, and the sparsification error bounds.
//! - [`dual_solver`]: the scalar dual of the projection problem, solved by n-ary
//!   bracketing in log-η space.
//! - [`projection`]: forward projection onto the KL ball and its closed-form
//!   vector-Jacobian product.
//! - [`gradcheck`]: central finite-difference verification of the backward pass.
//! - [`objectives`]: ratio, PPO-clip and trust-region surrogate objectives plus
//!   group advantage estimators.
//! - [`toy_rlvr`]: a small verifiable-reward sequence task and an on-policy
//!   trainer that exercises the whole pipeline.

pub mod dual_solver;
pub mod error;
pub mod gradcheck;
pub mod logspace;
pub mod objectives;
pub mod projection;
pub mod sparse_dist;
pub mod synthetic;
pub mod toy_rlvr;

pub use dual_solver::{BracketingParams, DualProblem, DualSolution};
pub use error::{Error, Result};
pub use projection::{ProjectionOutcome, SparseGradient, TrustRegionConfig};
pub use sparse_dist::{DenseLogits, SparseDist, SparsifyParams};
