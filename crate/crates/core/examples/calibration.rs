//! Posterior sampling around a merged model: draw S classifier heads from the
//! Gaussian posterior, pick β on validation, and compare ECE with the MAP model.

use mergeforge::merge::MergeMode;
use mergeforge::pipeline::commands::{calibrate_run, default_beta_grid, Run};
use mergeforge::pipeline::{bo_arm, build_harness, HarnessConfig, MergeContext, Shots, TestVault};
use mergeforge::boopt::Preset;
use mergeforge::Result;

fn main() -> Result<()> {
    let seed = 1;
    let (harness, _) = build_harness(&HarnessConfig::with_seed(seed))?;
    let pre = harness.pretrained_ckpt();
    let ctx = MergeContext::from_harness(&harness, MergeMode::Assisted, &pre, Shots::All)?;
    let arm = bo_arm(&ctx, &Preset::vit_like(), 30, seed)?;
    println!("BO val score {:.4}", arm.val_score);

    let vault = TestVault::new(harness.tasks.iter().map(|t| t.test.clone()).collect());
    let run = Run {
        harness,
        anchor_label: "pretrained".into(),
        ctx,
        vault,
    };
    let report = calibrate_run(&run, &arm.config, &default_beta_grid(), 10, seed)?;
    for p in &report.sweep {
        println!("beta {:>8.0e}  val acc {:.4}  val ECE {:.4}", p.beta, p.val_acc, p.val_ece);
    }
    println!("chosen beta {:?}", report.best_beta);
    println!("MAP      test acc {:.4}  ECE {:.4}", report.map_test_acc, report.map_test_ece);
    println!("ensemble test acc {:.4}  ECE {:.4}", report.ens_test_acc, report.ens_test_ece);
    Ok(())
}
