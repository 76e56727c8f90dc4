//! Outer-loop Bayesian optimization over merge hyperparameters.

pub mod gp;
pub mod log;
pub mod search;
pub mod space;

pub use gp::{default_hyper_grid, expected_improvement, gp_fit, GpHyper, GpModel};
pub use log::{read_history, HistoryLog};
pub use search::{bo_search, default_n_init, propose, BoOptions, SearchAbort, SearchOutcome, Trial, TrialHistory};
pub use space::{DimKind, Dimension, MergeSpace, Preset, SearchDomain, SearchSpace, Slot};
