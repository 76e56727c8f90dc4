use crate::ckpt::Checkpoint;
use crate::error::{Error, Result};
use crate::linalg::Tensor2D;

use super::data::TaskDataset;
use super::net::ToyNet;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(scores: &Tensor2D, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(scores.row(i)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn softmax_rows(logits: &Tensor2D) -> Tensor2D {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Mean validation accuracy of a merged checkpoint across tasks.
pub fn score(merged: &Checkpoint, val_sets: &[&TaskDataset]) -> Result<f64> {
    let net = ToyNet::from_checkpoint(merged)?;
    score_net(&net, val_sets)
}

pub fn score_net(net: &ToyNet, sets: &[&TaskDataset]) -> Result<f64> {
    if sets.is_empty() || sets.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptySplit);
    }
    let mut total = 0.0;
    for set in sets {
        total += accuracy(&net.logits(&set.inputs)?, &set.labels);
    }
    Ok(total / sets.len() as f64)
}

/// Average of the members' softmax outputs.
pub fn ensemble_predict(nets: &[ToyNet], inputs: &Tensor2D) -> Result<Tensor2D> {
    let first = nets.first().ok_or(Error::EmptyInput)?;
    let classes = first.output_dim();
    let mut acc = Tensor2D::zeros(inputs.rows(), classes);
    for net in nets {
        if net.output_dim() != classes {
            return Err(Error::Shape(format!(
                "ensemble member emits {} classes, expected {classes}",
                net.output_dim()
            )));
        }
        acc.axpy(1.0, &softmax_rows(&net.logits(inputs)?))?;
    }
    acc.scale_mut(1.0 / nets.len() as f64);
    Ok(acc)
}

/// Expected calibration error with `kappa` equal-width confidence bins.
pub fn ece(probs: &Tensor2D, labels: &[usize], kappa: usize) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    if probs.rows() != n {
        return Err(Error::Shape(format!("{} prediction rows for {n} labels", probs.rows())));
    }
    if kappa == 0 {
        return Err(Error::OutOfRange("kappa must be at least 1".into()));
    }
    let mut count = vec![0usize; kappa];
    let mut hits = vec![0.0; kappa];
    let mut conf = vec![0.0; kappa];
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row(i);
        let pred = argmax(row);
        let c = row[pred];
        let bin = ((c * kappa as f64).floor() as usize).min(kappa - 1);
        count[bin] += 1;
        conf[bin] += c;
        if pred == y {
            hits[bin] += 1.0;
        }
    }
    let total = (0..kappa)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let m = count[b] as f64;
            (m / n as f64) * (hits[b] / m - conf[b] / m).abs()
        })
        .sum();
    Ok(total)
}
