//! Bayesian model merging: closed-form MAP merges of fine-tuned experts
//! around an anchor, with the per-block hyperparameters tuned by Bayesian
//! optimization on held-out validation data.

pub mod boopt;
pub mod ckpt;
pub mod error;
pub mod linalg;
pub mod merge;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod toynet;

pub use ckpt::{assemble, ta_anchor, task_vectors, Checkpoint, ModuleMeta, TaskVectorSet};
pub use error::{Error, Result};
pub use linalg::{cholesky_solve, frobenius_cos, Cholesky, Tensor2D};
pub use merge::{map_merge, merge_all, posterior, sample_merged, Cell, MergeConfig, MergeMode, ModulePosterior};
pub use stats::{ModuleStats, StatsMap, StatsSource};
