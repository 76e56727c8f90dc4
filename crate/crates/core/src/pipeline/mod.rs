//! End-to-end toy experiments: harness construction, merge evaluation and
//! the search arms behind the command-line verbs.

pub mod commands;
pub mod context;
pub mod experiments;
pub mod harness;

pub use context::{resolve_anchor, tune_ta, AnchorChoice, MergeContext, ResolvedAnchor, Shots, TestVault};
pub use experiments::{bo_arm, final_score, random_arm, shared_lambda_arm, ArmResult, FinalScore, Variant};
pub use harness::{build_harness, ExpertReport, Harness, HarnessConfig};
