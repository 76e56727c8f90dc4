//! Exact Gaussian-process surrogate with a squared-exponential kernel and
//! grid-searched hyperparameters, plus Expected Improvement.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Tensor2D};

/// Base observation noise in standardized units.
pub const NOISE_VAR: f64 = 1e-6;
pub const SIGNAL_VAR_GRID: [f64; 3] = [0.5, 1.0, 2.0];
pub const LENGTHSCALE_GRID: [f64; 4] = [0.1, 0.2, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub signal_var: f64,
    pub lengthscale: f64,
}

/// The default `{0.5, 1, 2} × {0.1, 0.2, 0.5, 1.0}` grid.
pub fn default_hyper_grid() -> Vec<GpHyper> {
    SIGNAL_VAR_GRID
        .iter()
        .flat_map(|&signal_var| {
            LENGTHSCALE_GRID.iter().map(move |&lengthscale| GpHyper {
                signal_var,
                lengthscale,
            })
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel(h: &GpHyper, a: &[f64], b: &[f64]) -> f64 {
    h.signal_var * (-sq_dist(a, b) / (2.0 * h.lengthscale * h.lengthscale)).exp()
}

#[derive(Clone, Debug)]
pub struct GpModel {
    xs: Vec<Vec<f64>>,
    fs: Vec<f64>,
    mean: f64,
    scale: f64,
    hyper: GpHyper,
    noise_var: f64,
    chol: Cholesky,
    alpha: Vec<f64>,
    log_marginal: f64,
}

struct Fitted {
    chol: Cholesky,
    alpha: Vec<f64>,
    log_marginal: f64,
}

fn fit_one(xs: &[Vec<f64>], ys: &[f64], h: &GpHyper) -> Result<Fitted> {
    let n = xs.len();
    let k = Tensor2D::from_fn(n, n, |i, j| kernel(h, &xs[i], &xs[j]));
    let chol = Cholesky::factor(&k, NOISE_VAR)?;
    let alpha = chol.solve_vec(ys);
    let fit: f64 = ys.iter().zip(&alpha).map(|(y, a)| y * a).sum();
    let log_marginal =
        -0.5 * fit - 0.5 * chol.log_det() - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok(Fitted {
        chol,
        alpha,
        log_marginal,
    })
}

/// Fit on unit-cube points `xs` with scores `fs`, choosing the grid entry
/// with the largest log marginal likelihood (first one on ties).
pub fn gp_fit(xs: &[Vec<f64>], fs: &[f64], grid: &[GpHyper]) -> Result<GpModel> {
    if xs.len() != fs.len() {
        return Err(Error::dims("gp_fit", xs.len(), fs.len()));
    }
    if xs.len() < 2 {
        return Err(Error::Config("GP fit needs at least two observations".into()));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty GP hyperparameter grid".into()));
    }
    if fs.iter().any(|f| !f.is_finite()) {
        return Err(Error::NonFinite("gp_fit scores"));
    }
    let n = fs.len() as f64;
    let mean = fs.iter().sum::<f64>() / n;
    let var = fs.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / n;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let ys: Vec<f64> = fs.iter().map(|f| (f - mean) / scale).collect();

    let mut best: Option<(GpHyper, Fitted)> = None;
    let mut last_err = None;
    for h in grid {
        match fit_one(xs, &ys, h) {
            Ok(f) => {
                if best.as_ref().map_or(true, |(_, b)| f.log_marginal > b.log_marginal) {
                    best = Some((*h, f));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (hyper, fitted) = best.ok_or_else(|| last_err.expect("grid non-empty"))?;
    Ok(GpModel {
        xs: xs.to_vec(),
        fs: fs.to_vec(),
        mean,
        scale,
        hyper,
        noise_var: fitted.chol.jitter(),
        chol: fitted.chol,
        alpha: fitted.alpha,
        log_marginal: fitted.log_marginal,
    })
}

impl GpModel {
    pub fn hyper(&self) -> GpHyper {
        self.hyper
    }

    /// Effective noise variance (base noise plus any escalated jitter).
    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    pub fn observations(&self) -> (&[Vec<f64>], &[f64]) {
        (&self.xs, &self.fs)
    }

    pub fn best_observed(&self) -> f64 {
        self.fs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Standard deviation used to standardize the scores.
    pub fn score_scale(&self) -> f64 {
        self.scale
    }

    pub fn score_mean(&self) -> f64 {
        self.mean
    }

    /// Posterior mean and standard deviation in score units.
    pub fn predict(&self, point: &[f64]) -> (f64, f64) {
        let ks: Vec<f64> = self.xs.iter().map(|x| kernel(&self.hyper, x, point)).collect();
        let mu: f64 = ks.iter().zip(&self.alpha).map(|(k, a)| k * a).sum();
        let v = self.chol.forward_vec(&ks);
        let var = (self.hyper.signal_var - v.iter().map(|x| x * x).sum::<f64>()).max(0.0);
        (self.mean + self.scale * mu, self.scale * var.sqrt())
    }
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected Improvement for maximization.
pub fn expected_improvement(mu: f64, sigma: f64, f_best: f64, xi: f64) -> f64 {
    let gain = mu - f_best - xi;
    if !(sigma > 0.0) {
        return gain.max(0.0);
    }
    let z = gain / sigma;
    (gain * std_normal_cdf(z) + sigma * std_normal_pdf(z)).max(0.0)
}
