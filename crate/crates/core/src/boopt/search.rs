use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_path, rng};

use super::gp::{default_hyper_grid, expected_improvement, gp_fit, GpHyper, GpModel};
use super::log::HistoryLog;
use super::space::SearchDomain;

pub const DEFAULT_CANDIDATES: usize = 2048;
pub const DEFAULT_XI: f64 = 0.01;
/// Standard deviation of the per-coordinate incumbent perturbation.
pub const INCUMBENT_STEP: f64 = 0.05;

const STREAM_INIT: u64 = 0;
const STREAM_PROPOSE: u64 = 1;

/// `max(10, 2D)` random warm-start trials.
pub fn default_n_init(dim: usize) -> usize {
    (2 * dim).max(10)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial<C> {
    pub index: usize,
    pub config: C,
    pub point: Vec<f64>,
    pub score: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialHistory<C> {
    pub trials: Vec<Trial<C>>,
}

impl<C> Default for TrialHistory<C> {
    fn default() -> Self {
        Self { trials: Vec::new() }
    }
}

impl<C> TrialHistory<C> {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    /// Highest score, earliest trial on ties.
    pub fn best(&self) -> Option<&Trial<C>> {
        let mut best: Option<&Trial<C>> = None;
        for t in &self.trials {
            if best.map_or(true, |b| t.score > b.score) {
                best = Some(t);
            }
        }
        best
    }

    pub fn running_best(&self) -> Vec<f64> {
        let mut acc = f64::NEG_INFINITY;
        self.trials
            .iter()
            .map(|t| {
                acc = acc.max(t.score);
                acc
            })
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.trials.iter().map(|t| t.point.clone()).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.trials.iter().map(|t| t.score).collect()
    }

    /// Indices must be `0, 1, 2, ...` and scores finite.
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.trials.iter().enumerate() {
            if t.index != i {
                return Err(Error::Format(format!("trial {i} has index {}", t.index)));
            }
            if !t.score.is_finite() {
                return Err(Error::NonFinite("trial score"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BoOptions {
    pub budget: usize,
    pub n_init: usize,
    pub n_candidates: usize,
    pub xi: f64,
    pub seed: u64,
    pub hyper_grid: Vec<GpHyper>,
}

impl BoOptions {
    pub fn new(budget: usize, n_init: usize, seed: u64) -> Self {
        Self {
            budget,
            n_init,
            n_candidates: DEFAULT_CANDIDATES,
            xi: DEFAULT_XI,
            seed,
            hyper_grid: default_hyper_grid(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome<C> {
    pub best: Trial<C>,
    pub history: TrialHistory<C>,
}

/// A search that stopped early, with everything evaluated so far.
#[derive(Debug)]
pub struct SearchAbort<C> {
    pub error: Error,
    pub history: TrialHistory<C>,
}

impl<C> From<SearchAbort<C>> for Error {
    fn from(a: SearchAbort<C>) -> Self {
        a.error
    }
}

fn uniform_point(dim: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..dim).map(|_| r.random::<f64>()).collect()
}

/// Maximize EI over `n_candidates` uniform points plus a Gaussian
/// perturbation of the best observed point.
pub fn propose(model: &GpModel, dim: usize, seed: u64, n_candidates: usize, xi: f64) -> Vec<f64> {
    let mut r = rng(seed);
    let (xs, fs) = model.observations();
    let mut incumbent = 0;
    for (i, f) in fs.iter().enumerate() {
        if *f > fs[incumbent] {
            incumbent = i;
        }
    }
    let step = Normal::new(0.0, INCUMBENT_STEP).expect("valid std");
    let mut candidates: Vec<Vec<f64>> = (0..n_candidates.max(1))
        .map(|_| (0..dim).map(|_| r.random::<f64>()).collect())
        .collect();
    candidates.push(
        xs[incumbent]
            .iter()
            .map(|&u| (u + step.sample(&mut r)).clamp(0.0, 1.0))
            .collect(),
    );
    let f_best = model.best_observed();
    let mut best = 0;
    let mut best_ei = f64::NEG_INFINITY;
    for (i, c) in candidates.iter().enumerate() {
        let (mu, sigma) = model.predict(c);
        let ei = expected_improvement(mu, sigma, f_best, xi);
        if ei > best_ei {
            best_ei = ei;
            best = i;
        }
    }
    candidates.swap_remove(best)
}

fn next_point<C>(history: &TrialHistory<C>, dim: usize, k: usize, opts: &BoOptions) -> Result<Vec<f64>> {
    if k < opts.n_init {
        return Ok(uniform_point(dim, derive_path(opts.seed, &[STREAM_INIT, k as u64])));
    }
    let model = gp_fit(&history.points(), &history.scores(), &opts.hyper_grid)?;
    Ok(propose(
        &model,
        dim,
        derive_path(opts.seed, &[STREAM_PROPOSE, k as u64]),
        opts.n_candidates,
        opts.xi,
    ))
}

/// Run trials `prior.len() .. budget`, appending each one to `prior` (and to
/// `log` if given), and return the best trial over the whole history.
///
/// Trial `k` depends only on the seed and trials `0..k`, so resuming from a
/// saved prefix reproduces an uninterrupted run.
pub fn bo_search<D, F>(
    domain: &D,
    mut evaluator: F,
    opts: &BoOptions,
    prior: TrialHistory<D::Config>,
    mut log: Option<&mut HistoryLog>,
) -> std::result::Result<SearchOutcome<D::Config>, SearchAbort<D::Config>>
where
    D: SearchDomain,
    F: FnMut(&D::Config) -> Result<f64>,
{
    let mut history = prior;
    let abort = |error, history| Err(SearchAbort { error, history });
    if opts.n_init < 2 || opts.budget < opts.n_init {
        return abort(
            Error::Config(format!(
                "need budget >= n_init >= 2 (budget {}, n_init {})",
                opts.budget, opts.n_init
            )),
            history,
        );
    }
    if let Err(e) = history.validate() {
        return abort(e, history);
    }
    if history.len() > opts.budget {
        let msg = format!("history already has {} trials, budget is {}", history.len(), opts.budget);
        return abort(Error::Config(msg), history);
    }
    if let Some(t) = history.trials.iter().find(|t| t.point.len() != domain.dim()) {
        return abort(Error::dims("resume", domain.dim(), t.point.len()), history);
    }

    for k in history.len()..opts.budget {
        let start = Instant::now();
        let step = next_point(&history, domain.dim(), k, opts)
            .and_then(|point| domain.decode(&point).map(|config| (point, config)));
        let (point, config) = match step {
            Ok(v) => v,
            Err(e) => return abort(e, history),
        };
        let score = match evaluator(&config) {
            Ok(s) if s.is_finite() => s,
            Ok(s) => {
                let error = Error::EvaluatorFailure {
                    trial: k,
                    completed: history.len(),
                    message: format!("non-finite score {s}"),
                };
                return abort(error, history);
            }
            Err(e) => {
                let error = Error::EvaluatorFailure {
                    trial: k,
                    completed: history.len(),
                    message: e.to_string(),
                };
                return abort(error, history);
            }
        };
        let trial = Trial {
            index: k,
            config,
            point,
            score,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let Some(log) = log.as_deref_mut() {
            if let Err(e) = log.append(&trial) {
                history.trials.push(trial);
                return abort(e, history);
            }
        }
        history.trials.push(trial);
    }

    match history.best().cloned() {
        Some(best) => Ok(SearchOutcome { best, history }),
        None => abort(Error::EmptyInput, history),
    }
}
