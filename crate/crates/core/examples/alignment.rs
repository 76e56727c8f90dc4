//! Input second moments versus task-vector Grams on a small toy harness.
//! After fine-tuning with weight decay the two should point the same way
//! (positive Frobenius cosine) in every module.

use mergeforge::ckpt::task_vectors;
use mergeforge::linalg::Tensor2D;
use mergeforge::pipeline::{build_harness, HarnessConfig};
use mergeforge::stats::alignment_report;
use mergeforge::toynet::SplitSizes;
use mergeforge::Result;

fn main() -> Result<()> {
    let mut config = HarnessConfig::with_seed(3);
    config.tasks.tasks = 4;
    config.tasks.sizes = SplitSizes {
        train: 512,
        val: 128,
        test: 128,
        calib: 128,
    };
    config.finetune_epochs = 100;
    let (h, _) = build_harness(&config)?;

    let pre = h.pretrained_ckpt();
    let tvs = task_vectors(&pre, &h.expert_ckpts(), &pre)?;
    let calib: Vec<&Tensor2D> = h.tasks.iter().map(|t| &t.calib.inputs).collect();
    let report = alignment_report(&h.experts, &calib, &tvs)?;

    for row in &report.rows {
        match row.cos {
            Some(c) => println!("task {} {:<14} {c:.4}", row.task, row.module),
            None => println!("task {} {:<14} -", row.task, row.module),
        }
    }
    for (t, m) in report.task_means.iter().enumerate() {
        println!("task {t} mean {:.4}", m.unwrap_or(f64::NAN));
    }
    let min = report.defined().fold(f64::INFINITY, f64::min);
    println!("smallest cosine {min:.4}");
    Ok(())
}
