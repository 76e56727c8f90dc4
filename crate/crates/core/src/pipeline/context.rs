use std::borrow::Cow;
use std::collections::BTreeSet;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::ckpt::{assemble, ta_anchor, task_vectors, Checkpoint, TaskVectorSet};
use crate::error::{Error, Result};
use crate::linalg::Tensor2D;
use crate::merge::{merge_all, Cell, MergeConfig, MergeMode};
use crate::stats::{collect_assisted_all, data_free_stats, mix_all, StatsMap};
use crate::toynet::{score, TaskDataset, ToyNet};

use super::harness::Harness;

/// Candidate α values for the task-arithmetic anchor.
pub const TA_ALPHA_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorChoice {
    Pretrained,
    /// Task arithmetic; `None` tunes α on validation over [`TA_ALPHA_GRID`].
    Ta(Option<f64>),
    Path(PathBuf),
}

impl FromStr for AnchorChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(Self::Pretrained),
            "ta" => Ok(Self::Ta(None)),
            _ => {
                if let Some(alpha) = s.strip_prefix("ta:") {
                    let a: f64 = alpha
                        .parse()
                        .map_err(|_| Error::Config(format!("bad task-arithmetic alpha `{alpha}`")))?;
                    Ok(Self::Ta(Some(a)))
                } else if s.is_empty() {
                    Err(Error::Config("empty anchor".into()))
                } else {
                    Ok(Self::Path(PathBuf::from(s)))
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResolvedAnchor {
    pub checkpoint: Checkpoint,
    pub label: String,
    pub alpha: Option<f64>,
}

/// Task-arithmetic anchor with the α that scores best on validation
/// (smallest α on ties).
pub fn tune_ta(pretrained: &Checkpoint, experts: &[Checkpoint], val: &[&TaskDataset]) -> Result<(f64, Checkpoint, f64)> {
    let mut best: Option<(f64, Checkpoint, f64)> = None;
    for &alpha in &TA_ALPHA_GRID {
        let ckpt = ta_anchor(pretrained, experts, alpha)?;
        let s = score(&ckpt, val)?;
        if best.as_ref().map_or(true, |b| s > b.2) {
            best = Some((alpha, ckpt, s));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

pub fn resolve_anchor(
    choice: &AnchorChoice,
    pretrained: &Checkpoint,
    experts: &[Checkpoint],
    val: &[&TaskDataset],
) -> Result<ResolvedAnchor> {
    match choice {
        AnchorChoice::Pretrained => Ok(ResolvedAnchor {
            checkpoint: pretrained.clone(),
            label: "pretrained".into(),
            alpha: None,
        }),
        AnchorChoice::Ta(Some(alpha)) => Ok(ResolvedAnchor {
            checkpoint: ta_anchor(pretrained, experts, *alpha)?,
            label: format!("ta:{alpha}"),
            alpha: Some(*alpha),
        }),
        AnchorChoice::Ta(None) => {
            let (alpha, checkpoint, _) = tune_ta(pretrained, experts, val)?;
            Ok(ResolvedAnchor {
                checkpoint,
                label: format!("ta:{alpha}"),
                alpha: Some(alpha),
            })
        }
        AnchorChoice::Path(p) => {
            let checkpoint = Checkpoint::load(p)?;
            checkpoint.check_compatible(pretrained)?;
            Ok(ResolvedAnchor {
                checkpoint,
                label: p.display().to_string(),
                alpha: None,
            })
        }
    }
}

/// Test splits behind an access counter, so a run can prove that model
/// selection never looked at them.
#[derive(Debug)]
pub struct TestVault {
    sets: Vec<TaskDataset>,
    reads: AtomicUsize,
}

impl TestVault {
    pub fn new(sets: Vec<TaskDataset>) -> Self {
        Self {
            sets,
            reads: AtomicUsize::new(0),
        }
    }

    pub fn open(&self) -> Vec<&TaskDataset> {
        self.reads.fetch_add(1, Ordering::SeqCst);
        self.sets.iter().collect()
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }
}

/// Everything an evaluation of one `MergeConfig` needs. Holds validation
/// data only.
#[derive(Clone, Debug)]
pub struct MergeContext {
    pub mode: MergeMode,
    pub pretrained: Checkpoint,
    pub anchor: Checkpoint,
    pub task_vectors: TaskVectorSet,
    pub assisted: Option<StatsMap>,
    pub datafree: Option<StatsMap>,
    pub val: Vec<TaskDataset>,
}

/// How many calibration samples per task feed the assisted statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Shots {
    #[default]
    All,
    First(usize),
}

impl MergeContext {
    pub fn new(
        mode: MergeMode,
        pretrained: Checkpoint,
        anchor: Checkpoint,
        experts: &[ToyNet],
        expert_ckpts: &[Checkpoint],
        calib: &[&Tensor2D],
        val: Vec<TaskDataset>,
    ) -> Result<Self> {
        let tvs = task_vectors(&pretrained, expert_ckpts, &anchor)?;
        let assisted = match mode {
            MergeMode::DataFree => None,
            _ => Some(collect_assisted_all(experts, calib, &tvs)?),
        };
        let datafree = match mode {
            MergeMode::Assisted => None,
            _ => Some(data_free_stats(&tvs)?),
        };
        Ok(Self {
            mode,
            pretrained,
            anchor,
            task_vectors: tvs,
            assisted,
            datafree,
            val,
        })
    }

    pub fn from_harness(harness: &Harness, mode: MergeMode, anchor: &Checkpoint, shots: Shots) -> Result<Self> {
        let calib: Vec<Tensor2D> = harness
            .tasks
            .iter()
            .map(|t| match shots {
                Shots::All => Ok(t.calib.inputs.clone()),
                Shots::First(n) => Ok(t.calib.head(n)?.inputs),
            })
            .collect::<Result<_>>()?;
        let calib_refs: Vec<&Tensor2D> = calib.iter().collect();
        Self::new(
            mode,
            harness.pretrained_ckpt(),
            anchor.clone(),
            &harness.experts,
            &harness.expert_ckpts(),
            &calib_refs,
            harness.tasks.iter().map(|t| t.val.clone()).collect(),
        )
    }

    pub fn cells(&self) -> BTreeSet<Cell> {
        self.pretrained.cells()
    }

    pub fn val_sets(&self) -> Vec<&TaskDataset> {
        self.val.iter().collect()
    }

    pub fn stats(&self, config: &MergeConfig) -> Result<Cow<'_, StatsMap>> {
        let missing = || Error::Config(format!("statistics for mode {} were not collected", config.mode));
        match config.mode {
            MergeMode::Assisted => self.assisted.as_ref().map(Cow::Borrowed).ok_or_else(missing),
            MergeMode::DataFree => self.datafree.as_ref().map(Cow::Borrowed).ok_or_else(missing),
            MergeMode::Mixed => {
                let eps = config
                    .eps
                    .ok_or_else(|| Error::Config("mixed mode needs eps".into()))?;
                let (a, d) = self.assisted.as_ref().zip(self.datafree.as_ref()).ok_or_else(missing)?;
                Ok(Cow::Owned(mix_all(a, d, eps)?))
            }
        }
    }

    pub fn merge(&self, config: &MergeConfig) -> Result<Checkpoint> {
        let stats = self.stats(config)?;
        let merged = merge_all(&stats, &self.task_vectors, config)?;
        assemble(&self.pretrained, &merged, config, &self.anchor)
    }

    /// Mean validation accuracy of the merged model.
    pub fn score_val(&self, config: &MergeConfig) -> Result<f64> {
        score(&self.merge(config)?, &self.val_sets())
    }
}
