//! File-level implementations of the command-line verbs. Each returns its
//! report so callers other than the binary can use them directly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boopt::{default_n_init, read_history, BoOptions, HistoryLog, Preset, TrialHistory};
use crate::ckpt::Checkpoint;
use crate::error::{Error, Result};
use crate::merge::{MergeConfig, MergeMode};
use crate::rng::derive_seed;
use crate::stats::{alignment_report, AlignmentReport};
use crate::toynet::calibrate::{calibrate, CalibrationReport, CalibrationTarget};
use crate::toynet::{score, Split, TaskDataset};

use super::context::{resolve_anchor, AnchorChoice, MergeContext, Shots, TestVault};
use super::experiments::{
    bo_arm, final_score, mean_std, random_arm, run_bo, search_space, shared_lambda_arm, ArmResult, FinalScore,
    Variant, DEFAULT_BUDGET, SHARED_GRID_POINTS,
};
use super::harness::{self, ExpertReport, Harness, HarnessConfig};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Default β grid for calibration: `10^-2 … 10^8` plus a near-MAP `1e12`.
pub fn default_beta_grid() -> Vec<f64> {
    (-2..=8).map(|k| 10f64.powi(k)).chain([1e12]).collect()
}

/// Options shared by the verbs that work on a trained harness.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub harness: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub mode: MergeMode,
    pub anchor: AnchorChoice,
    pub preset: Preset,
    pub budget: usize,
    pub n_init: Option<usize>,
    pub resume: bool,
    /// Fraction of every validation split used for model selection.
    pub val_frac: f64,
    /// Calibration samples per task for assisted statistics (`None` = all).
    pub shots: Option<usize>,
}

impl RunOptions {
    pub fn new(harness: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            harness: harness.into(),
            out: out.into(),
            seed: 0,
            mode: MergeMode::Assisted,
            anchor: AnchorChoice::Pretrained,
            preset: Preset::vit_like(),
            budget: DEFAULT_BUDGET,
            n_init: None,
            resume: false,
            val_frac: 1.0,
            shots: None,
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Refuse to write into a non-empty directory unless `force` is set.
pub fn ensure_writable(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!(
                "{} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub tasks: usize,
    pub classes: usize,
    pub d_in: usize,
    pub samples_per_split: Vec<(Split, usize)>,
}

pub fn cmd_gen_tasks(dir: &Path, config: &HarnessConfig, force: bool) -> Result<DataSummary> {
    ensure_writable(dir, force)?;
    let tasks = harness::generate_data(config)?;
    harness::save_data(config, &tasks, dir)?;
    Ok(DataSummary {
        tasks: tasks.len(),
        classes: config.tasks.classes,
        d_in: config.tasks.d_in,
        samples_per_split: Split::ALL.iter().map(|&s| (s, config.tasks.sizes.get(s))).collect(),
    })
}

pub fn cmd_train_experts(dir: &Path, force: bool) -> Result<Vec<ExpertReport>> {
    let (config, tasks) = harness::load_data(dir)?;
    if harness::layout::pretrained(dir).exists() && !force {
        return Err(Error::Config(format!(
            "{} already holds trained models (pass --force to retrain)",
            dir.display()
        )));
    }
    let pretrained = harness::pretrain(&config, &tasks)?;
    let (experts, reports) = harness::train_experts(&config, &tasks, &pretrained)?;
    harness::save_models(&config, &pretrained, &experts, dir)?;
    write_json(&dir.join("experts.json"), &reports)?;
    Ok(reports)
}

/// A loaded harness with the anchor resolved and the merge context built.
pub struct Run {
    pub harness: Harness,
    pub anchor_label: String,
    pub ctx: MergeContext,
    pub vault: TestVault,
}

fn val_subset(set: &TaskDataset, frac: f64) -> Result<TaskDataset> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::OutOfRange(format!("val fraction {frac} not in (0, 1]")));
    }
    let n = ((set.len() as f64 * frac).ceil() as usize).max(1);
    set.head(n)
}

pub fn open_run(opts: &RunOptions) -> Result<Run> {
    let harness = Harness::load(&opts.harness)?;
    let pretrained = harness.pretrained_ckpt();
    let val: Vec<TaskDataset> = harness
        .tasks
        .iter()
        .map(|t| val_subset(&t.val, opts.val_frac))
        .collect::<Result<_>>()?;
    let val_refs: Vec<&TaskDataset> = val.iter().collect();
    let anchor = resolve_anchor(&opts.anchor, &pretrained, &harness.expert_ckpts(), &val_refs)?;
    let shots = opts.shots.map_or(Shots::All, Shots::First);
    let mut ctx = MergeContext::from_harness(&harness, opts.mode, &anchor.checkpoint, shots)?;
    ctx.val = val;
    let vault = TestVault::new(harness.tasks.iter().map(|t| t.test.clone()).collect());
    Ok(Run {
        harness,
        anchor_label: anchor.label,
        ctx,
        vault,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub anchor: String,
    pub config: MergeConfig,
    pub anchor_score: FinalScore,
    pub merged_score: FinalScore,
}

pub fn cmd_merge(opts: &RunOptions, config: &MergeConfig) -> Result<MergeReport> {
    let run = open_run(opts)?;
    let merged = run.ctx.merge(config)?;
    merged.save(opts.out.join("merged"))?;
    let report = MergeReport {
        anchor: run.anchor_label.clone(),
        config: config.clone(),
        anchor_score: checkpoint_score(&run.ctx.anchor, &run)?,
        merged_score: final_score(&run.ctx, config, &run.vault)?,
    };
    write_json(&opts.out.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn checkpoint_score(ckpt: &Checkpoint, run: &Run) -> Result<FinalScore> {
    Ok(FinalScore {
        val: score(ckpt, &run.ctx.val_sets())?,
        test: score(ckpt, &run.vault.open())?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub anchor: String,
    pub mode: MergeMode,
    pub preset: Preset,
    pub budget: usize,
    pub n_init: usize,
    pub seed: u64,
    pub resumed_trials: usize,
    pub trials_run: usize,
    pub best_trial: usize,
    pub best_config: MergeConfig,
    pub best_val: f64,
    pub test: f64,
    pub anchor_score: FinalScore,
    /// Test-split reads that happened while the search was running.
    pub test_reads_during_search: usize,
}

pub fn cmd_search(opts: &RunOptions) -> Result<SearchReport> {
    let run = open_run(opts)?;
    let space = search_space(&run.ctx, &opts.preset)?;
    let n_init = opts
        .n_init
        .unwrap_or_else(|| default_n_init(space.space.dims.len()))
        .min(opts.budget);
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let history_path = opts.out.join(HISTORY_FILE);
    let (prior, mut log) = if opts.resume && history_path.exists() {
        let prior: TrialHistory<MergeConfig> = read_history(&history_path)?;
        (prior, HistoryLog::append_to(&history_path)?)
    } else {
        (TrialHistory::default(), HistoryLog::create(&history_path)?)
    };
    let resumed = prior.len();
    let bo = BoOptions::new(opts.budget, n_init, opts.seed);
    let reads_before = run.vault.reads();
    let outcome = run_bo(&run.ctx, &space, &bo, prior, Some(&mut log))?;
    let test_reads_during_search = run.vault.reads() - reads_before;

    let best = &outcome.best;
    let merged = run.ctx.merge(&best.config)?;
    merged.save(opts.out.join("merged"))?;
    let report = SearchReport {
        anchor: run.anchor_label.clone(),
        mode: opts.mode,
        preset: opts.preset,
        budget: opts.budget,
        n_init,
        seed: opts.seed,
        resumed_trials: resumed,
        trials_run: outcome.history.len() - resumed,
        best_trial: best.index,
        best_config: best.config.clone(),
        best_val: best.score,
        test: score(&merged, &run.vault.open())?,
        anchor_score: checkpoint_score(&run.ctx.anchor, &run)?,
        test_reads_during_search,
    };
    write_json(&opts.out.join(REPORT_FILE), &report)?;
    write_json(&opts.out.join("best_config.json"), &best.config)?;
    let mut csv = String::from("trial,val_score,running_best\n");
    for (t, rb) in outcome.history.trials.iter().zip(outcome.history.running_best()) {
        writeln!(csv, "{},{},{}", t.index, t.score, rb).expect("string write");
    }
    write_text(&opts.out.join("trials.csv"), &csv)?;
    write_text(&opts.out.join("report.md"), &search_markdown(&report))?;
    Ok(report)
}

fn search_markdown(r: &SearchReport) -> String {
    let mut s = String::new();
    writeln!(s, "# Search ({} mode, anchor {})\n", r.mode, r.anchor).unwrap();
    writeln!(s, "| | val | test |\n|---|---|---|").unwrap();
    writeln!(s, "| anchor | {:.2} | {:.2} |", 100.0 * r.anchor_score.val, 100.0 * r.anchor_score.test).unwrap();
    writeln!(s, "| best (trial {}) | {:.2} | {:.2} |", r.best_trial, 100.0 * r.best_val, 100.0 * r.test).unwrap();
    writeln!(s, "\n{} trials ({} random), seed {}.", r.budget, r.n_init, r.seed).unwrap();
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub variant: Variant,
    pub evaluations: usize,
    pub val: Vec<f64>,
    pub test: Vec<f64>,
}

impl AblationRow {
    pub fn test_mean_std(&self) -> (f64, f64) {
        mean_std(&self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub anchor: String,
    pub budget: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

/// Shared-λ / random / BO arms for assisted and data-free statistics, plus
/// a mixed-Gram sweep built on `mix_shots` calibration samples per task.
pub fn cmd_ablate(opts: &RunOptions, seeds: &[u64], mix_shots: usize) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let base = open_run(&RunOptions {
        mode: MergeMode::Mixed,
        ..opts.clone()
    })?;
    let mut rows: Vec<AblationRow> = Vec::new();
    let mut push = |setting: &str, arm: &ArmResult, fs: FinalScore| {
        match rows.iter_mut().find(|r| r.setting == setting && r.variant == arm.variant) {
            Some(row) => {
                row.val.push(fs.val);
                row.test.push(fs.test);
            }
            None => rows.push(AblationRow {
                setting: setting.to_string(),
                variant: arm.variant,
                evaluations: arm.evaluations,
                val: vec![fs.val],
                test: vec![fs.test],
            }),
        }
    };
    let assisted = MergeContext {
        mode: MergeMode::Assisted,
        datafree: None,
        ..base.ctx.clone()
    };
    let datafree = MergeContext {
        mode: MergeMode::DataFree,
        assisted: None,
        ..base.ctx.clone()
    };
    let anchor = base.ctx.anchor.clone();
    let few = MergeContext::from_harness(&base.harness, MergeMode::Mixed, &anchor, Shots::First(mix_shots))?;
    let few = MergeContext { val: base.ctx.val.clone(), ..few };
    let few_assisted = MergeContext {
        mode: MergeMode::Assisted,
        ..few.clone()
    };

    for &seed in seeds {
        for (setting, ctx) in [("assisted", &assisted), ("data-free", &datafree)] {
            let arms = [
                shared_lambda_arm(ctx, &opts.preset, SHARED_GRID_POINTS, None)?,
                random_arm(ctx, &opts.preset, opts.budget, seed)?,
                bo_arm(ctx, &opts.preset, opts.budget, seed)?,
            ];
            for arm in &arms {
                push(setting, arm, final_score(ctx, &arm.config, &base.vault)?);
            }
        }
        let one = bo_arm(&few_assisted, &opts.preset, opts.budget, seed)?;
        push(
            &format!("assisted {mix_shots}-shot"),
            &one,
            final_score(&few_assisted, &one.config, &base.vault)?,
        );
        let mixed = bo_arm(&few, &opts.preset, opts.budget, derive_seed(seed, 1))?;
        push(
            &format!("mixed {mix_shots}-shot"),
            &mixed,
            final_score(&few, &mixed.config, &base.vault)?,
        );
    }
    let report = AblationReport {
        anchor: base.anchor_label.clone(),
        budget: opts.budget,
        seeds: seeds.to_vec(),
        rows,
    };
    write_json(&opts.out.join("ablation.json"), &report)?;
    write_text(&opts.out.join("ablation.csv"), &ablation_csv(&report))?;
    write_text(&opts.out.join("ablation.md"), &ablation_markdown(&report))?;
    Ok(report)
}

pub fn ablation_csv(r: &AblationReport) -> String {
    let mut s = String::from("setting,variant,evaluations,val_mean,val_std,test_mean,test_std\n");
    for row in &r.rows {
        let (vm, vs) = mean_std(&row.val);
        let (tm, ts) = mean_std(&row.test);
        writeln!(
            s,
            "{},{},{},{vm},{vs},{tm},{ts}",
            row.setting,
            row.variant.label(),
            row.evaluations
        )
        .unwrap();
    }
    s
}

pub fn ablation_markdown(r: &AblationReport) -> String {
    let mut s = String::new();
    writeln!(s, "| Setting | Variant | Val | Test |\n|---|---|---|---|").unwrap();
    for row in &r.rows {
        let (vm, vs) = mean_std(&row.val);
        let (tm, ts) = mean_std(&row.test);
        writeln!(
            s,
            "| {} | {} | {:.2} ± {:.2} | {:.2} ± {:.2} |",
            row.setting,
            row.variant.label(),
            100.0 * vm,
            100.0 * vs,
            100.0 * tm,
            100.0 * ts
        )
        .unwrap();
    }
    writeln!(s, "\nAnchor {}, budget {}, seeds {:?}.", r.anchor, r.budget, r.seeds).unwrap();
    s
}

pub fn cmd_align(opts: &RunOptions) -> Result<AlignmentReport> {
    let harness = Harness::load(&opts.harness)?;
    let pretrained = harness.pretrained_ckpt();
    let experts = harness.expert_ckpts();
    let tvs = crate::ckpt::task_vectors(&pretrained, &experts, &pretrained)?;
    let calib: Vec<_> = harness.tasks.iter().map(|t| &t.calib.inputs).collect();
    let report = alignment_report(&harness.experts, &calib, &tvs)?;
    write_json(&opts.out.join("align.json"), &report)?;
    let mut csv = String::from("task,module,cos\n");
    for row in &report.rows {
        let cos = row.cos.map_or_else(|| "undefined".to_string(), |c| c.to_string());
        writeln!(csv, "{},{},{cos}", row.task, row.module).unwrap();
    }
    write_text(&opts.out.join("align.csv"), &csv)?;
    Ok(report)
}

/// Sample the classifier head around the MAP merge given by `config`.
pub fn cmd_calibrate(
    opts: &RunOptions,
    config: &MergeConfig,
    beta_grid: &[f64],
    samples: usize,
) -> Result<CalibrationReport> {
    let run = open_run(opts)?;
    let report = calibrate_run(&run, config, beta_grid, samples, opts.seed)?;
    write_json(&opts.out.join("calibration.json"), &report)?;
    Ok(report)
}

pub fn calibrate_run(
    run: &Run,
    config: &MergeConfig,
    beta_grid: &[f64],
    samples: usize,
    seed: u64,
) -> Result<CalibrationReport> {
    let ctx = &run.ctx;
    let map_model = ctx.merge(config)?;
    let head = ctx
        .pretrained
        .modules()
        .keys()
        .max_by_key(|name| name.trim_start_matches("fc").parse::<usize>().unwrap_or(0))
        .cloned()
        .ok_or(Error::EmptyInput)?;
    let meta = &ctx.pretrained.meta()[&head];
    let stats = ctx.stats(config)?;
    let target = CalibrationTarget {
        map_model: &map_model,
        pretrained: &ctx.pretrained,
        module: &head,
        stats: stats.get(&head).ok_or_else(|| Error::MissingModule(head.clone()))?,
        anchor_vector: ctx.task_vectors.anchor_vector(&head)?,
        lambda: config.lambda(&meta.cell())?,
        scale: config.scale(meta.block)?,
    };
    calibrate(&target, beta_grid, samples, &ctx.val_sets(), &run.vault.open(), seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub val: f64,
    pub test: f64,
    pub per_task_test: Vec<f64>,
}

pub fn cmd_eval(opts: &RunOptions, checkpoint: &Path) -> Result<EvalReport> {
    let harness = Harness::load(&opts.harness)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_compatible(&harness.pretrained_ckpt())?;
    let report = EvalReport {
        checkpoint: checkpoint.display().to_string(),
        val: score(&ckpt, &harness.split(Split::Val))?,
        test: score(&ckpt, &harness.split(Split::Test))?,
        per_task_test: harness
            .tasks
            .iter()
            .map(|t| score(&ckpt, &[&t.test]))
            .collect::<Result<_>>()?,
    };
    write_json(&opts.out.join("eval.json"), &report)?;
    Ok(report)
}
