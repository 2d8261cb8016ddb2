//! Kernel-based multi-task contextual bandits.
//!
//! The crate is organised by layer:
//!
//! - [`kernels`]: kernels on context vectors and Gram matrices.
//! - [`krr`]: kernel ridge regression over `(task, context)` pairs with an
//!   incrementally maintained inverse.
//! - [`similarity`]: task-similarity estimation (conditional kernel
//!   embeddings and cross-task R²).
//! - [`bandit`]: UCB arm selection and the parallel, sequential and staged
//!   elimination runners.
//! - [`envs`]: synthetic and trace-driven environments.
//! - [`harness`]: experiment configuration, runners, theory checks and
//!   output writers used by the `mtbandit` binary.

pub mod bandit;
pub mod envs;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod krr;
pub mod similarity;

pub use error::{Error, Result};
pub use kernels::{ContextVector, KernelFamily, KernelSpec};
pub use krr::{AugmentedContext, ModelState, Prediction, QueryBatch, RefreshPolicy, Solver};
pub use similarity::{Regularizer, SimilarityMatrix, TaskDataset};
