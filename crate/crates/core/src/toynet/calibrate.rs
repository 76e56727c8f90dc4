//! Posterior-sampling ensembles for uncertainty calibration. Only one module
//! (normally the classifier head) is sampled; every other weight stays at
//! its MAP merge.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ckpt::Checkpoint;
use crate::error::{Error, Result};
use crate::linalg::Tensor2D;
use crate::merge::{posterior, sample_merged};
use crate::stats::ModuleStats;

use super::data::TaskDataset;
use super::metrics::{accuracy, ece, ensemble_predict, softmax_rows};
use super::net::ToyNet;

pub const DEFAULT_BINS: usize = 20;
pub const DEFAULT_SAMPLES: usize = 10;
/// Allowed validation-accuracy drop (fraction, i.e. 0.5 points) when picking β.
pub const ACCURACY_SLACK: f64 = 0.005;

/// Everything needed to sample one module of an already merged model.
pub struct CalibrationTarget<'a> {
    pub map_model: &'a Checkpoint,
    pub pretrained: &'a Checkpoint,
    pub module: &'a str,
    pub stats: &'a ModuleStats,
    pub anchor_vector: &'a Tensor2D,
    pub lambda: f64,
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaPoint {
    pub beta: f64,
    pub val_acc: f64,
    pub val_ece: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// `None` when no β met the accuracy constraint and the MAP model is kept.
    pub best_beta: Option<f64>,
    pub samples: usize,
    pub map_val_acc: f64,
    pub map_val_ece: f64,
    pub map_test_acc: f64,
    pub map_test_ece: f64,
    pub ens_val_acc: f64,
    pub ens_val_ece: f64,
    pub ens_test_acc: f64,
    pub ens_test_ece: f64,
    pub sweep: Vec<BetaPoint>,
}

/// Concatenate several splits into one input matrix and label vector.
pub fn pool(sets: &[&TaskDataset]) -> Result<(Tensor2D, Vec<usize>)> {
    let first = sets.first().ok_or(Error::EmptySplit)?;
    let d = first.inputs.cols();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for s in sets {
        if s.inputs.cols() != d {
            return Err(Error::Shape("pooled splits disagree on input width".into()));
        }
        data.extend_from_slice(s.inputs.data());
        labels.extend_from_slice(&s.labels);
    }
    if labels.is_empty() {
        return Err(Error::EmptySplit);
    }
    Ok((Tensor2D::new(labels.len(), d, data)?, labels))
}

fn ensemble_nets(target: &CalibrationTarget<'_>, beta: f64, samples: usize, seed: u64) -> Result<Vec<ToyNet>> {
    let post = posterior(target.stats, target.anchor_vector, target.lambda, beta)?;
    let posteriors: BTreeMap<String, _> = [(target.module.to_string(), post)].into();
    let w_pre = target.pretrained.module(target.module)?;
    sample_merged(&posteriors, samples, seed)?
        .into_iter()
        .map(|draw| {
            let mut ckpt = target.map_model.clone();
            ckpt.set_module(target.module, w_pre.add_scaled(target.scale, &draw[target.module])?)?;
            ToyNet::from_checkpoint(&ckpt)
        })
        .collect()
}

/// Sweep `beta_grid`, keep the β with the lowest validation ECE whose
/// validation accuracy stays within [`ACCURACY_SLACK`] of the MAP model, and
/// report test accuracy/ECE for both.
pub fn calibrate(
    target: &CalibrationTarget<'_>,
    beta_grid: &[f64],
    samples: usize,
    val_sets: &[&TaskDataset],
    test_sets: &[&TaskDataset],
    seed: u64,
) -> Result<CalibrationReport> {
    if beta_grid.is_empty() {
        return Err(Error::Config("beta grid is empty".into()));
    }
    let (val_x, val_y) = pool(val_sets)?;
    let (test_x, test_y) = pool(test_sets)?;
    let map_net = ToyNet::from_checkpoint(target.map_model)?;
    let map_val = softmax_rows(&map_net.logits(&val_x)?);
    let map_test = softmax_rows(&map_net.logits(&test_x)?);
    let map_val_acc = accuracy(&map_val, &val_y);
    let map_val_ece = ece(&map_val, &val_y, DEFAULT_BINS)?;

    let mut sweep = Vec::with_capacity(beta_grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &beta in beta_grid {
        let nets = ensemble_nets(target, beta, samples, seed)?;
        let probs = ensemble_predict(&nets, &val_x)?;
        let point = BetaPoint {
            beta,
            val_acc: accuracy(&probs, &val_y),
            val_ece: ece(&probs, &val_y, DEFAULT_BINS)?,
        };
        if point.val_acc >= map_val_acc - ACCURACY_SLACK
            && best.map_or(true, |(_, e)| point.val_ece < e)
        {
            best = Some((beta, point.val_ece));
        }
        sweep.push(point);
    }

    let (ens_val, ens_test) = match best {
        Some((beta, _)) => {
            let nets = ensemble_nets(target, beta, samples, seed)?;
            (ensemble_predict(&nets, &val_x)?, ensemble_predict(&nets, &test_x)?)
        }
        None => (map_val.clone(), map_test.clone()),
    };
    Ok(CalibrationReport {
        best_beta: best.map(|(b, _)| b),
        samples,
        map_val_acc,
        map_val_ece,
        map_test_acc: accuracy(&map_test, &test_y),
        map_test_ece: ece(&map_test, &test_y, DEFAULT_BINS)?,
        ens_val_acc: accuracy(&ens_val, &val_y),
        ens_val_ece: ece(&ens_val, &val_y, DEFAULT_BINS)?,
        ens_test_acc: accuracy(&ens_test, &test_y),
        ens_test_ece: ece(&ens_test, &test_y, DEFAULT_BINS)?,
        sweep,
    })
}
