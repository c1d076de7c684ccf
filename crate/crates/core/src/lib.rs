//! Entropy-regularized softmax consistency and path consistency learning.
//!
//! - [`softmax`]: log-sum-exp kernels (`softmax`, `soft_indmax`, entropy).
//! - [`mdp`]: tabular MDPs, the synthetic tree, algorithmic tape tasks.
//! - [`oracle`]: exact dynamic programming and consistency verifiers.
//! - [`model`]: tabular, linear and recurrent policy/value models with
//!   analytic gradients, plus the unified Q parameterization.
//! - [`losses`]: soft consistency error, PCL / Unified PCL / A2C updates.
//! - [`replay`]: exponentiated-reward episode replay.
//! - [`train`]: training loops and evaluation.
//! - [`suites`]: randomized property checks driven by the `verify` command.

pub mod losses;
pub mod mdp;
pub mod model;
pub mod oracle;
pub mod parallel;
pub mod replay;
pub mod softmax;
pub mod suites;
pub mod train;

pub use parallel::Execution;
