use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ckpt::{Checkpoint, ModuleMeta};
use crate::error::{Error, Result};
use crate::linalg::Tensor2D;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Calib,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Test, Split::Calib];

    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
            Split::Calib => 3,
        }
    }

    fn from_code(code: f64) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|s| s.code() as f64 == code)
            .ok_or_else(|| Error::Format(format!("unknown split code {code}")))
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Calib => "calib",
        })
    }
}

/// Labelled samples of one task split; `inputs` is `n × d_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub inputs: Tensor2D,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` samples (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::EmptySplit);
        }
        let d = self.inputs.cols();
        Ok(Self {
            inputs: Tensor2D::new(n, d, self.inputs.data()[..n * d].to_vec())?,
            labels: self.labels[..n].to_vec(),
            split: self.split,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.insert_module(
            ModuleMeta {
                name: "inputs".into(),
                rows: self.inputs.rows(),
                cols: self.inputs.cols(),
                block: 0,
                group: "data".into(),
            },
            self.inputs.clone(),
        )
        .expect("meta matches tensor");
        ckpt.insert_aux("labels", self.labels.iter().map(|&l| l as f64).collect());
        ckpt.insert_aux("split", vec![self.split.code() as f64]);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let inputs = ckpt.module("inputs")?.clone();
        let labels = ckpt
            .aux_vec("labels")?
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("bad label {v}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != inputs.rows() {
            return Err(Error::Shape(format!(
                "{} labels for {} inputs",
                labels.len(),
                inputs.rows()
            )));
        }
        let split = Split::from_code(*ckpt.aux_vec("split")?.first().ok_or(Error::EmptyInput)?)?;
        Ok(Self {
            inputs,
            labels,
            split,
        })
    }
}

/// All splits of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplits {
    pub train: TaskDataset,
    pub val: TaskDataset,
    pub test: TaskDataset,
    pub calib: TaskDataset,
}

impl TaskSplits {
    pub fn get(&self, split: Split) -> &TaskDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::Calib => &self.calib,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub calib: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
            Split::Calib => self.calib,
        }
    }
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2048,
            val: 256,
            test: 512,
            calib: 128,
        }
    }
}

/// Synthetic multi-task problem: every task is a Gaussian mixture whose class
/// means are one shared template rotated by a task-specific orthogonal matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskGenConfig {
    pub tasks: usize,
    pub classes: usize,
    pub d_in: usize,
    pub sizes: SplitSizes,
    /// Norm of each template class mean.
    pub separation: f64,
    /// Per-coordinate standard deviation of the within-class noise.
    pub noise: f64,
    /// Norm of a component shared by all template means. After rotation it
    /// points in a task-specific direction, so tasks occupy different input
    /// regions.
    #[serde(default)]
    pub offset: f64,
    /// Template class means and `noise` live in the first `signal_dims`
    /// coordinates; the remaining ones carry `ambient_noise` only. The whole
    /// template distribution is rotated per task. `None` means all of `d_in`.
    #[serde(default)]
    pub signal_dims: Option<usize>,
    #[serde(default)]
    pub ambient_noise: f64,
}

impl Default for TaskGenConfig {
    fn default() -> Self {
        Self {
            tasks: 8,
            classes: 4,
            d_in: 32,
            sizes: SplitSizes::default(),
            separation: 3.0,
            noise: 1.0,
            offset: 0.0,
            signal_dims: Some(8),
            ambient_noise: 0.2,
        }
    }
}

/// Haar-ish random orthogonal matrix via modified Gram–Schmidt on a Gaussian
/// matrix.
pub fn random_orthogonal(d: usize, seed: u64) -> Tensor2D {
    let mut r = rng::rng(seed);
    let mut q = Tensor2D::standard_normal(d, d, &mut r);
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
            let prev = q.row(j).to_vec();
            for (a, b) in q.row_mut(i).iter_mut().zip(prev) {
                *a -= dot * b;
            }
        }
        let norm = q.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        q.row_mut(i).iter_mut().for_each(|v| *v /= norm);
    }
    q
}

pub fn gen_tasks(cfg: &TaskGenConfig, seed: u64) -> Result<Vec<TaskSplits>> {
    if cfg.tasks < 2 || cfg.classes < 2 {
        return Err(Error::Config(format!(
            "need at least 2 tasks and 2 classes, got {} and {}",
            cfg.tasks, cfg.classes
        )));
    }
    if cfg.d_in == 0 {
        return Err(Error::Config("d_in must be positive".into()));
    }
    let k = cfg.signal_dims.unwrap_or(cfg.d_in);
    if k == 0 || k > cfg.d_in {
        return Err(Error::Config(format!("signal_dims {k} outside 1..={}", cfg.d_in)));
    }
    let mut tr = rng::rng(rng::derive_seed(seed, 0));
    let mut template = Tensor2D::zeros(cfg.classes, cfg.d_in);
    for c in 0..cfg.classes {
        let raw = Tensor2D::standard_normal(1, k, &mut tr);
        let norm = raw.frobenius_norm();
        for (dst, v) in template.row_mut(c).iter_mut().zip(raw.data()) {
            *dst = v / norm * cfg.separation;
        }
    }
    if cfg.offset != 0.0 {
        let shared = Tensor2D::standard_normal(1, k, &mut tr);
        let norm = shared.frobenius_norm();
        for c in 0..cfg.classes {
            for (dst, v) in template.row_mut(c).iter_mut().zip(shared.data()) {
                *dst += v / norm * cfg.offset;
            }
        }
    }
    let spread: Vec<f64> = (0..cfg.d_in)
        .map(|j| if j < k { cfg.noise } else { cfg.ambient_noise })
        .collect();
    (0..cfg.tasks)
        .map(|t| {
            let task_seed = rng::derive_path(seed, &[1, t as u64]);
            let q = random_orthogonal(cfg.d_in, rng::derive_seed(task_seed, 0));
            let make = |split: Split| -> Result<TaskDataset> {
                let n = cfg.sizes.get(split);
                if n == 0 {
                    return Err(Error::EmptySplit);
                }
                let mut r = rng::rng(rng::derive_seed(task_seed, 1 + split.code()));
                let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
                labels.shuffle(&mut r);
                let mut local = Tensor2D::standard_normal(n, cfg.d_in, &mut r);
                for (i, &y) in labels.iter().enumerate() {
                    let row = local.row_mut(i);
                    for ((x, m), sd) in row.iter_mut().zip(template.row(y)).zip(&spread) {
                        *x = *x * sd + m;
                    }
                }
                // x ↦ Q x for every row
                let inputs = local.matmul_nt(&q)?;
                Ok(TaskDataset {
                    inputs,
                    labels,
                    split,
                })
            };
            Ok(TaskSplits {
                train: make(Split::Train)?,
                val: make(Split::Val)?,
                test: make(Split::Test)?,
                calib: make(Split::Calib)?,
            })
        })
        .collect()
}
