//! The command-line workflow driven from the library: generate tasks, train
//! experts, search merge hyperparameters, and evaluate the result.

use mergeforge::merge::MergeMode;
use mergeforge::pipeline::commands::{cmd_eval, cmd_gen_tasks, cmd_search, cmd_train_experts, RunOptions};
use mergeforge::pipeline::{AnchorChoice, HarnessConfig};
use mergeforge::Result;

fn main() -> Result<()> {
    let root = tempfile::tempdir().expect("temp dir");
    let harness = root.path().join("harness");

    let summary = cmd_gen_tasks(&harness, &HarnessConfig::with_seed(0), false)?;
    println!("{} tasks, {} classes, d_in {}", summary.tasks, summary.classes, summary.d_in);

    for r in cmd_train_experts(&harness, false)? {
        println!(
            "expert {}: {} epochs, val acc {:.3} (pretrained {:.3})",
            r.task, r.epochs, r.val_acc, r.pretrained_val_acc
        );
    }

    for (mode, anchor, tag) in [
        (MergeMode::Assisted, AnchorChoice::Pretrained, "pre"),
        (MergeMode::DataFree, AnchorChoice::Pretrained, "pre"),
        (MergeMode::Assisted, AnchorChoice::Ta(None), "ta"),
    ] {
        let out = root.path().join(format!("{mode}-{tag}"));
        let opts = RunOptions {
            mode,
            anchor,
            budget: 40,
            ..RunOptions::new(&harness, &out)
        };
        let r = cmd_search(&opts)?;
        let eval = cmd_eval(&opts, &out.join("merged"))?;
        println!(
            "{mode:<9} anchor {:<14} test {:.3} -> merged val {:.3} test {:.3} (best trial {})",
            r.anchor, r.anchor_score.test, eval.val, eval.test, r.best_trial
        );
    }
    Ok(())
}
