//! Closed-form anchor-regularized merging.
//!
//! For each module the merged task vector minimizes
//! `‖Y − U X‖²_F + λ ‖U − U⁽⁰⁾‖²_F`, whose stationary point satisfies
//! `U (G + λI) = C + λ U⁽⁰⁾` with `G = X Xᵀ`, `C = Y Xᵀ`. The same system
//! with `G`, `C` replaced by task-vector surrogates gives the data-free merge.
//! Posterior rows are Gaussian with covariance `β⁻¹ (G + λI)⁻¹`.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ckpt::TaskVectorSet;
use crate::error::{Error, Result};
use crate::linalg::{sample_matrix_gaussian, Cholesky, Tensor2D};
use crate::rng;
use crate::stats::ModuleStats;

/// A (block, group) tying cell: every module in a cell shares one λ.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub block: usize,
    pub group: String,
}

impl Cell {
    pub fn new(block: usize, group: &str) -> Self {
        Self {
            block,
            group: group.to_string(),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "b{}/{}", self.block, self.group)
    }
}

/// Where the moment statistics come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    #[default]
    Assisted,
    #[serde(rename = "datafree")]
    DataFree,
    Mixed,
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MergeMode::Assisted => "assisted",
            MergeMode::DataFree => "datafree",
            MergeMode::Mixed => "mixed",
        })
    }
}

impl std::str::FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "assisted" => Ok(MergeMode::Assisted),
            "datafree" | "data-free" => Ok(MergeMode::DataFree),
            "mixed" => Ok(MergeMode::Mixed),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// One point of the hyperparameter space: λ per tying cell, scale per block,
/// and the Gram mixing weight in mixed mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub mode: MergeMode,
    #[serde(with = "lambda_list")]
    pub lambdas: BTreeMap<Cell, f64>,
    pub scales: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
}

impl MergeConfig {
    pub fn new(mode: MergeMode) -> Self {
        Self {
            mode,
            lambdas: BTreeMap::new(),
            scales: BTreeMap::new(),
            eps: None,
        }
    }

    /// Every cell gets `lambda`, every block gets `scale`.
    pub fn shared<'a>(
        mode: MergeMode,
        cells: impl IntoIterator<Item = &'a Cell>,
        lambda: f64,
        scale: f64,
    ) -> Self {
        let mut cfg = Self::new(mode);
        for cell in cells {
            cfg.lambdas.insert(cell.clone(), lambda);
            cfg.scales.insert(cell.block, scale);
        }
        cfg
    }

    pub fn set_lambda(&mut self, block: usize, group: &str, lambda: f64) {
        self.lambdas.insert(Cell::new(block, group), lambda);
    }

    pub fn set_scale(&mut self, block: usize, scale: f64) {
        self.scales.insert(block, scale);
    }

    pub fn lambda(&self, cell: &Cell) -> Result<f64> {
        self.lambdas
            .get(cell)
            .copied()
            .ok_or_else(|| Error::MissingConfigCell {
                block: cell.block,
                group: cell.group.clone(),
            })
    }

    pub fn scale(&self, block: usize) -> Result<f64> {
        self.scales
            .get(&block)
            .copied()
            .ok_or_else(|| Error::Config(format!("no scale for block {block}")))
    }
}

mod lambda_list {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        block: usize,
        group: String,
        lambda: f64,
    }

    pub fn serialize<S: Serializer>(map: &BTreeMap<Cell, f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|(c, &lambda)| Entry {
                block: c.block,
                group: c.group.clone(),
                lambda,
            })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<BTreeMap<Cell, f64>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        Ok(entries
            .into_iter()
            .map(|e| (Cell { block: e.block, group: e.group }, e.lambda))
            .collect())
    }
}

/// Gaussian posterior of one module's merged task vector.
#[derive(Clone, Debug)]
pub struct ModulePosterior {
    pub map_estimate: Tensor2D,
    pub row_cov: Tensor2D,
    pub beta: f64,
}

fn check_merge_shapes(stats: &ModuleStats, anchor_vector: &Tensor2D) -> Result<()> {
    let d_in = stats.gram.rows();
    if stats.gram.cols() != d_in || stats.cross.cols() != d_in {
        return Err(Error::dims(
            "map_merge",
            format!("gram {d_in}x{d_in}, cross _x{d_in}"),
            format!("gram {:?}, cross {:?}", stats.gram.shape(), stats.cross.shape()),
        ));
    }
    if anchor_vector.shape() != stats.cross.shape() {
        return Err(Error::dims(
            "map_merge",
            format!("anchor {:?}", stats.cross.shape()),
            format!("{:?}", anchor_vector.shape()),
        ));
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::OutOfRange(format!("lambda {lambda}")));
    }
    Ok(())
}

fn solve_map(chol: &Cholesky, stats: &ModuleStats, anchor_vector: &Tensor2D, lambda: f64) -> Result<Tensor2D> {
    // U (G + λI) = C + λU⁽⁰⁾  ⇔  (G + λI) Uᵀ = (C + λU⁽⁰⁾)ᵀ
    let rhs = stats.cross.add_scaled(lambda, anchor_vector)?;
    Ok(chol.solve(&rhs.transpose())?.transpose())
}

/// Closed-form MAP merge of one module. `lambda = 0` is allowed; a singular
/// Gram then falls through the jitter ladder.
pub fn map_merge(stats: &ModuleStats, anchor_vector: &Tensor2D, lambda: f64) -> Result<Tensor2D> {
    check_merge_shapes(stats, anchor_vector)?;
    check_lambda(lambda)?;
    let chol = Cholesky::factor(&stats.gram, lambda)?;
    solve_map(&chol, stats, anchor_vector, lambda)
}

/// `‖U (G + λI) − C − λU⁽⁰⁾‖_F`, i.e. half the objective's gradient norm.
pub fn stationarity_residual(
    u: &Tensor2D,
    stats: &ModuleStats,
    anchor_vector: &Tensor2D,
    lambda: f64,
) -> Result<f64> {
    let mut r = u.matmul(&stats.gram)?;
    r.axpy(lambda, u)?;
    r.axpy(-1.0, &stats.cross)?;
    r.axpy(-lambda, anchor_vector)?;
    Ok(r.frobenius_norm())
}

/// Merge every module with the λ of its tying cell. Output is keyed (and
/// therefore ordered) by module name.
pub fn merge_all(
    stats: &BTreeMap<String, ModuleStats>,
    task_vectors: &TaskVectorSet,
    config: &MergeConfig,
) -> Result<BTreeMap<String, Tensor2D>> {
    let jobs = task_vectors
        .meta
        .values()
        .map(|meta| {
            let lambda = config.lambda(&meta.cell())?;
            let st = stats
                .get(&meta.name)
                .ok_or_else(|| Error::MissingModule(meta.name.clone()))?;
            let anchor = task_vectors.anchor_vector(&meta.name)?;
            Ok((meta.name.as_str(), st, anchor, lambda))
        })
        .collect::<Result<Vec<_>>>()?;
    let merged = jobs
        .par_iter()
        .map(|&(name, st, anchor, lambda)| Ok((name.to_string(), map_merge(st, anchor, lambda)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(merged.into_iter().collect())
}

/// MAP estimate together with the row covariance `β⁻¹ (G + λI)⁻¹`.
pub fn posterior(
    stats: &ModuleStats,
    anchor_vector: &Tensor2D,
    lambda: f64,
    beta: f64,
) -> Result<ModulePosterior> {
    check_merge_shapes(stats, anchor_vector)?;
    check_lambda(lambda)?;
    if !(beta > 0.0) {
        return Err(Error::OutOfRange(format!("beta {beta}")));
    }
    let chol = Cholesky::factor(&stats.gram, lambda)?;
    let map_estimate = solve_map(&chol, stats, anchor_vector, lambda)?;
    let inv = chol.solve(&Tensor2D::identity(stats.gram.rows()))?;
    let d = inv.rows();
    let row_cov = Tensor2D::from_fn(d, d, |i, j| 0.5 * (inv[(i, j)] + inv[(j, i)]) / beta);
    Ok(ModulePosterior {
        map_estimate,
        row_cov,
        beta,
    })
}

/// Draw `count` merged task-vector sets; module `m` of sample `r` uses the
/// seed derived from `(seed, r, m)`.
pub fn sample_merged(
    posteriors: &BTreeMap<String, ModulePosterior>,
    count: usize,
    seed: u64,
) -> Result<Vec<BTreeMap<String, Tensor2D>>> {
    if count == 0 {
        return Err(Error::OutOfRange("sample count must be positive".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|r| {
            posteriors
                .iter()
                .enumerate()
                .map(|(m, (name, post))| {
                    let s = rng::derive_path(seed, &[r as u64, m as u64]);
                    Ok((name.clone(), sample_matrix_gaussian(&post.map_estimate, &post.row_cov, s)?))
                })
                .collect()
        })
        .collect()
}
