//! Merging without any activations: task vectors stand in for the input
//! statistics. With one task and λ = 0 the merge returns that task's vector.

use std::collections::BTreeMap;

use mergeforge::ckpt::{task_vectors, Checkpoint, ModuleMeta};
use mergeforge::linalg::Tensor2D;
use mergeforge::merge::{merge_all, MergeConfig, MergeMode};
use mergeforge::rng;
use mergeforge::stats::data_free_stats;
use mergeforge::Result;

fn checkpoint(seed: u64, scale: f64) -> Result<Checkpoint> {
    let mut r = rng::rng(seed);
    let mut c = Checkpoint::new();
    for (block, group, rows, cols) in [(0, "mlp-in", 8, 4), (0, "mlp-out", 4, 8), (1, "mlp-in", 8, 4)] {
        let name = format!("block{block}.{group}");
        let meta = ModuleMeta {
            name,
            rows,
            cols,
            block,
            group: group.into(),
        };
        c.insert_module(meta, Tensor2D::standard_normal(rows, cols, &mut r).scale(scale))?;
    }
    Ok(c)
}

fn perturbed(base: &Checkpoint, seed: u64) -> Result<Checkpoint> {
    let delta = checkpoint(seed, 0.1)?;
    let mut out = base.clone();
    for (name, w) in base.modules() {
        out.set_module(name, w.add(delta.module(name)?)?)?;
    }
    Ok(out)
}

fn main() -> Result<()> {
    let pretrained = checkpoint(1, 1.0)?;
    let experts: Vec<Checkpoint> = (0..3).map(|t| perturbed(&pretrained, 10 + t)).collect::<Result<_>>()?;

    // zero anchor: U⁽⁰⁾ = 0, i.e. the pretrained weights
    let tvs = task_vectors(&pretrained, &experts, &pretrained)?;
    let stats = data_free_stats(&tvs)?;
    for lambda in [1e-4, 1e-2, 1.0] {
        let cfg = MergeConfig::shared(MergeMode::DataFree, &pretrained.cells(), lambda, 1.0);
        let merged = merge_all(&stats, &tvs, &cfg)?;
        let norms: Vec<String> = merged
            .iter()
            .map(|(name, u)| format!("{name} {:.4}", u.frobenius_norm()))
            .collect();
        println!("lambda {lambda:.0e}: {}", norms.join(", "));
    }

    let single = task_vectors(&pretrained, &experts[..1], &pretrained)?;
    let cfg = MergeConfig::shared(MergeMode::DataFree, &pretrained.cells(), 0.0, 1.0);
    let merged: BTreeMap<_, _> = merge_all(&data_free_stats(&single)?, &single, &cfg)?;
    // wide modules (d_out < d_in) have a singular UᵀU, so the jitter ladder
    // kicks in and recovery is only approximate there
    for (name, u) in &merged {
        let u1 = single.task_vector(name, 0)?;
        println!(
            "one task, lambda 0, {name} {:?}: max |U_MAP - U1| = {:.2e}",
            u1.shape(),
            u.max_abs_diff(u1)
        );
    }
    Ok(())
}
