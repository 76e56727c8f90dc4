use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mergeforge::boopt::Preset;
use mergeforge::merge::{MergeConfig, MergeMode};
use mergeforge::pipeline::commands::{self, read_json, RunOptions};
use mergeforge::pipeline::{AnchorChoice, Harness, HarnessConfig};
use mergeforge::{Error, Result};

#[derive(Parser)]
#[command(name = "mergeforge", version, about = "Anchor-regularized model merging with Bayesian hyperparameter search")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Global {
    /// Seed for data generation, training and search.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Statistics used by the merge: assisted, datafree or mixed.
    #[arg(long, global = true, default_value = "assisted")]
    mode: MergeMode,
    /// pretrained, ta (α tuned on validation), ta:<alpha>, or a checkpoint directory.
    #[arg(long, global = true, default_value = "pretrained")]
    anchor: String,
    /// Output directory for reports and checkpoints.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Hyperparameter ranges: vit-like (λ in [1e-4, 1]) or llama-like (λ in [1e-3, 100]).
    #[arg(long, global = true, default_value = "vit-like")]
    preset: String,
    /// Continue the search from an existing history log in --out.
    #[arg(long, global = true)]
    resume: bool,
    /// Fraction of each validation split used for model selection.
    #[arg(long, global = true, default_value_t = 1.0)]
    val_frac: f64,
    /// Overwrite existing harness contents.
    #[arg(long, global = true)]
    force: bool,
    /// Harness directory holding datasets and checkpoints.
    #[arg(long, global = true, default_value = "harness")]
    harness: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-task datasets.
    GenTasks {
        /// JSON harness config; defaults to the built-in toy setup.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Pretrain the base network and fine-tune one expert per task.
    TrainExperts,
    /// Merge with an explicit configuration.
    Merge {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Bayesian optimization of the block-tied merge hyperparameters.
    Search {
        #[arg(long, default_value_t = 60)]
        budget: usize,
        #[arg(long)]
        n_init: Option<usize>,
    },
    /// Shared-λ vs random vs BO, assisted vs data-free, plus the mixed-Gram sweep.
    Ablate {
        #[arg(long, default_value_t = 60)]
        budget: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Calibration samples per task for the mixed-Gram rows.
        #[arg(long, default_value_t = 1)]
        shots: usize,
    },
    /// Alignment between input second moments and task-vector Grams.
    Align,
    /// Posterior-sampling ensemble of the classifier head.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 10)]
        samples: usize,
        /// Comma-separated β values; defaults to 1e-2..1e8 plus 1e12.
        #[arg(long, value_delimiter = ',')]
        betas: Vec<f64>,
    },
    /// Score a checkpoint on validation and test splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// MergeConfig JSON (for example best_config.json from a search).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shared λ for every cell when no --config is given.
    #[arg(long, default_value_t = 1e-2)]
    lambda: f64,
    /// Shared scale for every block when no --config is given.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Gram mixing weight for mixed mode.
    #[arg(long)]
    eps: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self, g: &Global) -> Result<MergeConfig> {
        if let Some(path) = &self.config {
            let cfg: MergeConfig = read_json(path)?;
            if cfg.mode != g.mode {
                return Err(Error::Config(format!(
                    "{} holds a {} config but --mode is {}",
                    path.display(),
                    cfg.mode,
                    g.mode
                )));
            }
            return Ok(cfg);
        }
        let harness = Harness::load(&g.harness)?;
        let mut cfg = MergeConfig::shared(g.mode, &harness.pretrained_ckpt().cells(), self.lambda, self.scale);
        match (g.mode, self.eps) {
            (MergeMode::Mixed, Some(e)) => cfg.eps = Some(e),
            (MergeMode::Mixed, None) => return Err(Error::Config("mixed mode needs --eps".into())),
            (_, Some(_)) => return Err(Error::Config("--eps only applies to mixed mode".into())),
            _ => {}
        }
        Ok(cfg)
    }
}

fn run_options(g: &Global) -> Result<RunOptions> {
    Ok(RunOptions {
        seed: g.seed,
        mode: g.mode,
        anchor: g.anchor.parse::<AnchorChoice>()?,
        preset: Preset::by_name(&g.preset)?,
        resume: g.resume,
        val_frac: g.val_frac,
        ..RunOptions::new(&g.harness, &g.out)
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenTasks { config } => {
            let mut cfg = match config {
                Some(p) => read_json::<HarnessConfig>(p)?,
                None => HarnessConfig::default(),
            };
            cfg.seed = g.seed;
            let s = commands::cmd_gen_tasks(&g.harness, &cfg, g.force)?;
            println!(
                "wrote {} tasks ({} classes, d_in {}) to {}",
                s.tasks,
                s.classes,
                s.d_in,
                g.harness.display()
            );
        }
        Command::TrainExperts => {
            let reports = commands::cmd_train_experts(&g.harness, g.force)?;
            println!("task  epochs  train   val     pretrained val");
            for r in &reports {
                println!(
                    "{:<5} {:<7} {:<7} {:<7} {}",
                    r.task,
                    r.epochs,
                    pct(r.train_acc),
                    pct(r.val_acc),
                    pct(r.pretrained_val_acc)
                );
            }
        }
        Command::Merge { cfg } => {
            let config = cfg.resolve(g)?;
            let r = commands::cmd_merge(&run_options(g)?, &config)?;
            println!(
                "anchor {}: val {} test {}\nmerged: val {} test {}",
                r.anchor,
                pct(r.anchor_score.val),
                pct(r.anchor_score.test),
                pct(r.merged_score.val),
                pct(r.merged_score.test)
            );
        }
        Command::Search { budget, n_init } => {
            let opts = RunOptions {
                budget: *budget,
                n_init: *n_init,
                ..run_options(g)?
            };
            let r = commands::cmd_search(&opts)?;
            println!(
                "ran {} trials ({} resumed); best trial {}: val {} test {} (anchor {} test {})",
                r.trials_run,
                r.resumed_trials,
                r.best_trial,
                pct(r.best_val),
                pct(r.test),
                r.anchor,
                pct(r.anchor_score.test)
            );
        }
        Command::Ablate { budget, seeds, shots } => {
            let opts = RunOptions {
                budget: *budget,
                ..run_options(g)?
            };
            let r = commands::cmd_ablate(&opts, seeds, *shots)?;
            print!("{}", commands::ablation_markdown(&r));
        }
        Command::Align => {
            let r = commands::cmd_align(&run_options(g)?)?;
            for (t, m) in r.task_means.iter().enumerate() {
                match m {
                    Some(v) => println!("task {t}: mean cos {v:.4}"),
                    None => println!("task {t}: undefined"),
                }
            }
        }
        Command::Calibrate { cfg, samples, betas } => {
            let config = cfg.resolve(g)?;
            let grid = if betas.is_empty() {
                commands::default_beta_grid()
            } else {
                betas.clone()
            };
            let r = commands::cmd_calibrate(&run_options(g)?, &config, &grid, *samples)?;
            println!(
                "beta {:?}\nMAP:      test acc {} ECE {:.4}\nensemble: test acc {} ECE {:.4}",
                r.best_beta,
                pct(r.map_test_acc),
                r.map_test_ece,
                pct(r.ens_test_acc),
                r.ens_test_ece
            );
        }
        Command::Eval { checkpoint } => {
            let r = commands::cmd_eval(&run_options(g)?, checkpoint)?;
            println!("val {} test {}", pct(r.val), pct(r.test));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(n) = std::env::var("MERGEFORGE_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: MERGEFORGE_THREADS must be a positive integer");
                return ExitCode::from(2);
            }
        }
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
