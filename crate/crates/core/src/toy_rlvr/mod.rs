//! Verifiable-reward toy environment and on-policy trainer.
//!
//! A linear softmax policy learns a fixed sequence transform with binary
//! exact-match rewards. Each step samples groups of responses, keeps the
//! sparsified rollout distributions as the old policy, and runs several
//! minibatch updates under either the trust-region or the clipped objective.

pub mod experiment;
pub mod policy;
pub mod task;
pub mod trainer;

pub use experiment::{run_experiment, run_training, ExperimentSummary, RunResult};
pub use policy::LinearSoftmaxPolicy;
pub use task::{ToyTask, Transform};
pub use trainer::{
    rollout, train_step, Estimator, GroupRollouts, Method, StepMetrics, TrainConfig, TrainState,
};
