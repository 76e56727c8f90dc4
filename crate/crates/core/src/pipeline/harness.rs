//! The toy multi-task setup: datasets, a pretrained base and one fine-tuned
//! expert per task, plus their on-disk layout.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ckpt::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{derive_path, derive_seed};
use crate::toynet::{
    gen_tasks, score_net, sgd_finetune, Plateau, SgdParams, Split, TaskDataset, TaskGenConfig, TaskSplits, ToyNet,
};

pub const CONFIG_FILE: &str = "harness.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub tasks: TaskGenConfig,
    pub hidden: usize,
    /// Number of linear layers, head included.
    pub layers: usize,
    pub blocks: usize,
    pub eta: f64,
    pub rho: f64,
    pub batch: usize,
    pub pretrain_epochs: usize,
    /// Auxiliary tasks (same template family, different rotations) used for
    /// pretraining. `0` pretrains on the union of the evaluated tasks.
    #[serde(default)]
    pub pretrain_tasks: usize,
    pub finetune_epochs: usize,
    pub plateau: Option<Plateau>,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            tasks: TaskGenConfig::default(),
            hidden: 64,
            layers: 4,
            blocks: 2,
            eta: 0.05,
            rho: 1e-4,
            batch: 64,
            pretrain_epochs: 50,
            pretrain_tasks: 8,
            finetune_epochs: 300,
            plateau: Some(Plateau::default()),
            seed: 0,
        }
    }
}

impl HarnessConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.tasks.d_in];
        w.extend(std::iter::repeat(self.hidden).take(self.layers.saturating_sub(1)));
        w.push(self.tasks.classes);
        w
    }

    fn data_seed(&self) -> u64 {
        derive_seed(self.seed, 0)
    }

    fn pretrain_params(&self) -> SgdParams {
        SgdParams {
            eta: self.eta,
            rho: self.rho,
            epochs: self.pretrain_epochs,
            batch: self.batch,
            seed: derive_seed(self.seed, 2),
            plateau: None,
        }
    }

    fn finetune_params(&self, task: usize) -> SgdParams {
        SgdParams {
            eta: self.eta,
            rho: self.rho,
            epochs: self.finetune_epochs,
            batch: self.batch,
            seed: derive_path(self.seed, &[3, task as u64]),
            plateau: self.plateau,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Harness {
    pub config: HarnessConfig,
    pub tasks: Vec<TaskSplits>,
    pub pretrained: ToyNet,
    pub experts: Vec<ToyNet>,
}

/// Per-expert summary printed by `train-experts`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertReport {
    pub task: usize,
    pub epochs: usize,
    pub final_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub pretrained_val_acc: f64,
}

pub fn generate_data(config: &HarnessConfig) -> Result<Vec<TaskSplits>> {
    gen_tasks(&config.tasks, config.data_seed())
}

fn union(tasks: &[TaskSplits], split: Split) -> Result<TaskDataset> {
    let sets: Vec<&TaskDataset> = tasks.iter().map(|t| t.get(split)).collect();
    let (inputs, labels) = crate::toynet::calibrate::pool(&sets)?;
    Ok(TaskDataset { inputs, labels, split })
}

/// Train splits of the auxiliary pretraining tasks: task ids `T..T+A` of the
/// same generator, so they share the template but not the rotations.
pub fn pretrain_data(config: &HarnessConfig) -> Result<Vec<TaskSplits>> {
    let all = TaskGenConfig {
        tasks: config.tasks.tasks + config.pretrain_tasks,
        ..config.tasks.clone()
    };
    let mut tasks = gen_tasks(&all, config.data_seed())?;
    Ok(tasks.split_off(config.tasks.tasks))
}

/// Train the shared base, either on the union of the evaluated tasks' train
/// splits or on the auxiliary tasks.
pub fn pretrain(config: &HarnessConfig, tasks: &[TaskSplits]) -> Result<ToyNet> {
    let init = ToyNet::init(&config.widths(), derive_seed(config.seed, 1));
    let data = if config.pretrain_tasks == 0 {
        union(tasks, Split::Train)?
    } else {
        union(&pretrain_data(config)?, Split::Train)?
    };
    Ok(sgd_finetune(&init, &data, &config.pretrain_params())?.net)
}

/// Fine-tune one expert per task from `pretrained`, concurrently.
pub fn train_experts(
    config: &HarnessConfig,
    tasks: &[TaskSplits],
    pretrained: &ToyNet,
) -> Result<(Vec<ToyNet>, Vec<ExpertReport>)> {
    let results = tasks
        .par_iter()
        .enumerate()
        .map(|(t, task)| {
            let out = sgd_finetune(pretrained, &task.train, &config.finetune_params(t)).map_err(|e| match e {
                Error::Divergence { epoch, loss } => {
                    Error::Config(format!("expert {t} diverged at epoch {epoch} (loss {loss})"))
                }
                other => other,
            })?;
            let report = ExpertReport {
                task: t,
                epochs: out.losses.len(),
                final_loss: out.losses.last().copied().unwrap_or(f64::NAN),
                train_acc: score_net(&out.net, &[&task.train])?,
                val_acc: score_net(&out.net, &[&task.val])?,
                pretrained_val_acc: score_net(pretrained, &[&task.val])?,
            };
            Ok((out.net, report))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().unzip())
}

pub fn build_harness(config: &HarnessConfig) -> Result<(Harness, Vec<ExpertReport>)> {
    let tasks = generate_data(config)?;
    let pretrained = pretrain(config, &tasks)?;
    let (experts, reports) = train_experts(config, &tasks, &pretrained)?;
    Ok((
        Harness {
            config: config.clone(),
            tasks,
            pretrained,
            experts,
        },
        reports,
    ))
}

impl Harness {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn split(&self, split: Split) -> Vec<&TaskDataset> {
        self.tasks.iter().map(|t| t.get(split)).collect()
    }

    pub fn pretrained_ckpt(&self) -> Checkpoint {
        self.pretrained.to_checkpoint(self.config.blocks)
    }

    pub fn expert_ckpts(&self) -> Vec<Checkpoint> {
        self.experts.iter().map(|e| e.to_checkpoint(self.config.blocks)).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        save_data(&self.config, &self.tasks, dir)?;
        save_models(&self.config, &self.pretrained, &self.experts, dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (config, tasks) = load_data(dir)?;
        let pretrained = ToyNet::from_checkpoint(&Checkpoint::load(layout::pretrained(dir))?)?;
        let experts = (0..tasks.len())
            .map(|t| ToyNet::from_checkpoint(&Checkpoint::load(layout::expert(dir, t))?))
            .collect::<Result<Vec<_>>>()?;
        if experts.len() != config.tasks.tasks {
            return Err(Error::Config("expert count does not match the harness config".into()));
        }
        Ok(Self {
            config,
            tasks,
            pretrained,
            experts,
        })
    }
}

/// Paths inside a harness directory.
pub mod layout {
    use super::*;

    pub fn config(dir: &Path) -> PathBuf {
        dir.join(CONFIG_FILE)
    }

    pub fn split(dir: &Path, task: usize, split: Split) -> PathBuf {
        dir.join("data").join(format!("task{task}")).join(split.to_string())
    }

    pub fn pretrained(dir: &Path) -> PathBuf {
        dir.join("pretrained")
    }

    pub fn expert(dir: &Path, task: usize) -> PathBuf {
        dir.join("experts").join(format!("expert{task}"))
    }
}

pub fn save_data(config: &HarnessConfig, tasks: &[TaskSplits], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = layout::config(dir);
    fs::write(&path, serde_json::to_string_pretty(config)? + "\n").map_err(|e| Error::io(&path, e))?;
    for (t, task) in tasks.iter().enumerate() {
        for split in Split::ALL {
            task.get(split).to_checkpoint().save(layout::split(dir, t, split))?;
        }
    }
    Ok(())
}

pub fn load_config(dir: &Path) -> Result<HarnessConfig> {
    let path = layout::config(dir);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_data(dir: &Path) -> Result<(HarnessConfig, Vec<TaskSplits>)> {
    let config = load_config(dir)?;
    let tasks = (0..config.tasks.tasks)
        .map(|t| {
            let get = |split| TaskDataset::from_checkpoint(&Checkpoint::load(layout::split(dir, t, split))?);
            Ok(TaskSplits {
                train: get(Split::Train)?,
                val: get(Split::Val)?,
                test: get(Split::Test)?,
                calib: get(Split::Calib)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((config, tasks))
}

pub fn save_models(config: &HarnessConfig, pretrained: &ToyNet, experts: &[ToyNet], dir: &Path) -> Result<()> {
    pretrained.to_checkpoint(config.blocks).save(layout::pretrained(dir))?;
    for (t, e) in experts.iter().enumerate() {
        e.to_checkpoint(config.blocks).save(layout::expert(dir, t))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toynet::SplitSizes;

    pub(crate) fn tiny_config(seed: u64) -> HarnessConfig {
        HarnessConfig {
            tasks: TaskGenConfig {
                tasks: 3,
                classes: 3,
                d_in: 6,
                sizes: SplitSizes {
                    train: 96,
                    val: 48,
                    test: 48,
                    calib: 24,
                },
                signal_dims: Some(4),
                ..TaskGenConfig::default()
            },
            hidden: 8,
            pretrain_epochs: 5,
            finetune_epochs: 20,
            seed,
            ..HarnessConfig::default()
        }
    }

    #[test]
    fn widths_follow_layer_count() {
        assert_eq!(HarnessConfig::default().widths(), vec![32, 64, 64, 64, 4]);
    }

    #[test]
    fn save_load_round_trip() {
        let (h, reports) = build_harness(&tiny_config(4)).unwrap();
        assert_eq!(reports.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        h.save(dir.path()).unwrap();
        let back = Harness::load(dir.path()).unwrap();
        assert_eq!(back.config, h.config);
        assert_eq!(back.tasks, h.tasks);
        assert_eq!(back.pretrained, h.pretrained);
        assert_eq!(back.experts, h.experts);
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let (a, _) = build_harness(&tiny_config(7)).unwrap();
        let (b, _) = build_harness(&tiny_config(7)).unwrap();
        assert_eq!(a.experts, b.experts);
    }
}
