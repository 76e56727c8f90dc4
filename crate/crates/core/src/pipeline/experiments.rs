//! Search arms and the comparisons built from them.

use serde::{Deserialize, Serialize};

use crate::boopt::{bo_search, default_n_init, BoOptions, HistoryLog, MergeSpace, Preset, SearchOutcome, TrialHistory};
use crate::error::{Error, Result};
use crate::merge::{MergeConfig, MergeMode};
use crate::toynet::score;

use super::context::{MergeContext, TestVault};

pub const DEFAULT_BUDGET: usize = 60;
pub const SHARED_GRID_POINTS: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    SharedLambda,
    Random,
    Bo,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::SharedLambda => "shared-λ",
            Variant::Random => "random",
            Variant::Bo => "BO",
        }
    }
}

/// Outcome of one arm: the configuration picked on validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub variant: Variant,
    pub mode: MergeMode,
    pub config: MergeConfig,
    pub val_score: f64,
    pub evaluations: usize,
}

pub fn search_space(ctx: &MergeContext, preset: &Preset) -> Result<MergeSpace> {
    MergeSpace::new(&ctx.cells(), ctx.mode, preset)
}

/// BO over the block-tied space. `n_init = budget` gives pure random search.
pub fn run_bo(
    ctx: &MergeContext,
    space: &MergeSpace,
    opts: &BoOptions,
    prior: TrialHistory<MergeConfig>,
    log: Option<&mut HistoryLog>,
) -> std::result::Result<SearchOutcome<MergeConfig>, crate::boopt::SearchAbort<MergeConfig>> {
    bo_search(space, |cfg: &MergeConfig| ctx.score_val(cfg), opts, prior, log)
}

fn arm_from(variant: Variant, mode: MergeMode, out: SearchOutcome<MergeConfig>) -> ArmResult {
    ArmResult {
        variant,
        mode,
        config: out.best.config,
        val_score: out.best.score,
        evaluations: out.history.len(),
    }
}

pub fn bo_arm(ctx: &MergeContext, preset: &Preset, budget: usize, seed: u64) -> Result<ArmResult> {
    let space = search_space(ctx, preset)?;
    let n_init = default_n_init(space.space.dims.len()).min(budget);
    let out = run_bo(ctx, &space, &BoOptions::new(budget, n_init, seed), TrialHistory::default(), None)?;
    Ok(arm_from(Variant::Bo, ctx.mode, out))
}

pub fn random_arm(ctx: &MergeContext, preset: &Preset, budget: usize, seed: u64) -> Result<ArmResult> {
    let space = search_space(ctx, preset)?;
    let out = run_bo(ctx, &space, &BoOptions::new(budget, budget, seed), TrialHistory::default(), None)?;
    Ok(arm_from(Variant::Random, ctx.mode, out))
}

/// One λ shared by every cell, `s = 1`, over a log grid spanning the preset's
/// λ range. Mixed mode keeps ε at `eps`.
pub fn shared_lambda_arm(ctx: &MergeContext, preset: &Preset, points: usize, eps: Option<f64>) -> Result<ArmResult> {
    if points < 2 {
        return Err(Error::Config("shared-λ grid needs at least two points".into()));
    }
    let cells = ctx.cells();
    let (lo, hi) = (preset.lambda_lo.ln(), preset.lambda_hi.ln());
    let mut best: Option<(MergeConfig, f64)> = None;
    for i in 0..points {
        let lambda = (lo + (hi - lo) * i as f64 / (points - 1) as f64).exp();
        let mut cfg = MergeConfig::shared(ctx.mode, &cells, lambda, 1.0);
        if ctx.mode == MergeMode::Mixed {
            cfg.eps = Some(eps.unwrap_or(0.5));
        }
        let s = ctx.score_val(&cfg)?;
        if best.as_ref().map_or(true, |b| s > b.1) {
            best = Some((cfg, s));
        }
    }
    let (config, val_score) = best.expect("points >= 2");
    Ok(ArmResult {
        variant: Variant::SharedLambda,
        mode: ctx.mode,
        config,
        val_score,
        evaluations: points,
    })
}

/// Validation and test score of a chosen configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalScore {
    pub val: f64,
    pub test: f64,
}

pub fn final_score(ctx: &MergeContext, config: &MergeConfig, vault: &TestVault) -> Result<FinalScore> {
    let merged = ctx.merge(config)?;
    Ok(FinalScore {
        val: score(&merged, &ctx.val_sets())?,
        test: score(&merged, &vault.open())?,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
