//! Per-module moment pairs `(G, C)`.
//!
//! * assisted: `G = Σ x xᵀ`, `C = Σ (U⁽ᵗ⁾x) xᵀ` over calibration activations
//!   captured from each expert on its own task;
//! * data-free: `G = Σ_t U⁽ᵗ⁾ᵀU⁽ᵗ⁾`, `C = Σ_t U⁽ᵗ⁾U⁽ᵗ⁾ᵀU⁽ᵗ⁾`;
//! * mixed: convex combination of the two with weight `ε` on the assisted side.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ckpt::{Checkpoint, ModuleMeta, TaskVectorSet};
use crate::error::{Error, Result};
use crate::linalg::{frobenius_cos, Tensor2D};
use crate::toynet::ToyNet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum StatsSource {
    Assisted,
    DataFree,
    Mixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleStats {
    /// `d_in × d_in` input second moment.
    pub gram: Tensor2D,
    /// `d_out × d_in` cross moment.
    pub cross: Tensor2D,
    pub sample_count: usize,
    pub source: StatsSource,
}

pub type StatsMap = BTreeMap<String, ModuleStats>;

/// Moments contributed by one expert on its own calibration inputs
/// (`n × d_in`, one sample per row).
pub fn collect_assisted(
    finetuned: &ToyNet,
    calib_inputs: &Tensor2D,
    task_vectors: &TaskVectorSet,
    task: usize,
) -> Result<StatsMap> {
    let capture = finetuned.forward_capture(calib_inputs)?;
    let mut out = BTreeMap::new();
    for name in task_vectors.module_names() {
        let x = capture
            .activations
            .get(name)
            .ok_or_else(|| Error::MissingModule(name.clone()))?;
        let u = task_vectors.task_vector(name, task)?;
        if x.rows() != u.cols() {
            return Err(Error::Shape(format!(
                "module `{name}`: activation dim {} vs d_in {}",
                x.rows(),
                u.cols()
            )));
        }
        let y = u.matmul(x)?;
        out.insert(
            name.clone(),
            ModuleStats {
                gram: x.gram_rows(),
                cross: y.matmul_nt(x)?,
                sample_count: x.cols(),
                source: StatsSource::Assisted,
            },
        );
    }
    Ok(out)
}

/// Add `part` into `total` module by module.
pub fn accumulate(total: &mut StatsMap, part: StatsMap) -> Result<()> {
    for (name, st) in part {
        match total.get_mut(&name) {
            Some(acc) => {
                acc.gram.axpy(1.0, &st.gram)?;
                acc.cross.axpy(1.0, &st.cross)?;
                acc.sample_count += st.sample_count;
            }
            None => {
                total.insert(name, st);
            }
        }
    }
    Ok(())
}

/// Assisted moments summed over all experts. Per-task collection runs in
/// parallel; the reduction is sequential in task order.
pub fn collect_assisted_all(
    experts: &[ToyNet],
    calib_inputs: &[&Tensor2D],
    task_vectors: &TaskVectorSet,
) -> Result<StatsMap> {
    if experts.len() != calib_inputs.len() || experts.len() != task_vectors.task_count() {
        return Err(Error::Config(format!(
            "{} experts, {} calibration sets, {} task vectors",
            experts.len(),
            calib_inputs.len(),
            task_vectors.task_count()
        )));
    }
    let parts = experts
        .par_iter()
        .zip(calib_inputs.par_iter())
        .enumerate()
        .map(|(t, (net, x))| collect_assisted(net, x, task_vectors, t))
        .collect::<Result<Vec<_>>>()?;
    let mut total = BTreeMap::new();
    for part in parts {
        accumulate(&mut total, part)?;
    }
    Ok(total)
}

pub fn data_free_stats(task_vectors: &TaskVectorSet) -> Result<StatsMap> {
    if task_vectors.task_count() == 0 {
        return Err(Error::Config("data-free statistics need at least one task".into()));
    }
    task_vectors
        .per_module
        .iter()
        .map(|(name, us)| {
            let (rows, cols) = us[0].shape();
            let mut gram = Tensor2D::zeros(cols, cols);
            let mut cross = Tensor2D::zeros(rows, cols);
            for u in us {
                if u.shape() != (rows, cols) {
                    return Err(Error::Shape(format!("task vectors of `{name}` differ in shape")));
                }
                let utu = u.gram_cols();
                cross.axpy(1.0, &u.matmul(&utu)?)?;
                gram.axpy(1.0, &utu)?;
            }
            Ok((
                name.clone(),
                ModuleStats {
                    gram,
                    cross,
                    sample_count: 0,
                    source: StatsSource::DataFree,
                },
            ))
        })
        .collect()
}

pub fn mix_stats(assisted: &ModuleStats, datafree: &ModuleStats, eps: f64) -> Result<ModuleStats> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::OutOfRange(format!("eps {eps} outside [0, 1]")));
    }
    let mut gram = assisted.gram.scale(eps);
    gram.axpy(1.0 - eps, &datafree.gram)?;
    let mut cross = assisted.cross.scale(eps);
    cross.axpy(1.0 - eps, &datafree.cross)?;
    Ok(ModuleStats {
        gram,
        cross,
        sample_count: assisted.sample_count,
        source: StatsSource::Mixed(eps),
    })
}

pub fn mix_all(assisted: &StatsMap, datafree: &StatsMap, eps: f64) -> Result<StatsMap> {
    assisted
        .iter()
        .map(|(name, a)| {
            let d = datafree
                .get(name)
                .ok_or_else(|| Error::MissingModule(name.clone()))?;
            Ok((name.clone(), mix_stats(a, d, eps)?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub task: usize,
    pub module: String,
    /// `None` when the task vector is exactly zero.
    pub cos: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub rows: Vec<AlignmentRow>,
    /// Mean over the defined rows of each task.
    pub task_means: Vec<Option<f64>>,
}

impl AlignmentReport {
    pub fn defined(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().filter_map(|r| r.cos)
    }
}

/// `cos_F((1/N) Σ x xᵀ, U⁽ᵗ⁾ᵀU⁽ᵗ⁾)` for every task and module.
pub fn alignment_report(
    finetuned: &[ToyNet],
    calib_inputs: &[&Tensor2D],
    task_vectors: &TaskVectorSet,
) -> Result<AlignmentReport> {
    if finetuned.len() != calib_inputs.len() {
        return Err(Error::Config("one calibration set per expert required".into()));
    }
    let mut rows = Vec::new();
    let mut task_means = Vec::with_capacity(finetuned.len());
    for (t, (net, x)) in finetuned.iter().zip(calib_inputs).enumerate() {
        if x.rows() == 0 {
            return Err(Error::EmptySplit);
        }
        let capture = net.forward_capture(x)?;
        let mut sum = 0.0;
        let mut defined = 0usize;
        for name in task_vectors.module_names() {
            let a = capture
                .activations
                .get(name)
                .ok_or_else(|| Error::MissingModule(name.clone()))?;
            let second = a.gram_rows().scale(1.0 / x.rows() as f64);
            let u = task_vectors.task_vector(name, t)?;
            let cos = match frobenius_cos(&second, &u.gram_cols()) {
                Ok(c) => Some(c),
                Err(Error::ZeroMatrix) => None,
                Err(e) => return Err(e),
            };
            if let Some(c) = cos {
                sum += c;
                defined += 1;
            }
            rows.push(AlignmentRow {
                task: t,
                module: name.clone(),
                cos,
            });
        }
        task_means.push((defined > 0).then(|| sum / defined as f64));
    }
    Ok(AlignmentReport { rows, task_means })
}

fn source_code(source: StatsSource) -> Vec<f64> {
    match source {
        StatsSource::Assisted => vec![0.0, 0.0],
        StatsSource::DataFree => vec![1.0, 0.0],
        StatsSource::Mixed(e) => vec![2.0, e],
    }
}

/// Store statistics in the checkpoint container (`<module>.gram`,
/// `<module>.cross` plus count/source aux vectors).
pub fn save_stats(stats: &StatsMap, dir: impl AsRef<Path>) -> Result<()> {
    let mut ckpt = Checkpoint::new();
    for (name, st) in stats {
        for (suffix, t) in [("gram", &st.gram), ("cross", &st.cross)] {
            ckpt.insert_module(
                ModuleMeta {
                    name: format!("{name}.{suffix}"),
                    rows: t.rows(),
                    cols: t.cols(),
                    block: 0,
                    group: suffix.to_string(),
                },
                t.clone(),
            )?;
        }
        ckpt.insert_aux(format!("{name}.sample_count"), vec![st.sample_count as f64]);
        ckpt.insert_aux(format!("{name}.source"), source_code(st.source));
    }
    ckpt.save(dir)
}

pub fn load_stats(dir: impl AsRef<Path>) -> Result<StatsMap> {
    let ckpt = Checkpoint::load(dir)?;
    let mut out = BTreeMap::new();
    for key in ckpt.modules().keys() {
        let Some(name) = key.strip_suffix(".gram") else {
            continue;
        };
        let source = match ckpt.aux_vec(&format!("{name}.source"))? {
            [c, _] if *c == 0.0 => StatsSource::Assisted,
            [c, _] if *c == 1.0 => StatsSource::DataFree,
            [c, e] if *c == 2.0 => StatsSource::Mixed(*e),
            other => return Err(Error::Format(format!("bad stats source {other:?}"))),
        };
        let count = ckpt
            .aux_vec(&format!("{name}.sample_count"))?
            .first()
            .copied()
            .ok_or(Error::EmptyInput)?;
        out.insert(
            name.to_string(),
            ModuleStats {
                gram: ckpt.module(key)?.clone(),
                cross: ckpt.module(&format!("{name}.cross"))?.clone(),
                sample_count: count as usize,
                source,
            },
        );
    }
    Ok(out)
}
