//! Checkpoint container: save, reload bit-exactly, derive task vectors and a
//! task-arithmetic anchor, and assemble a merged model.

use mergeforge::ckpt::{assemble, ta_anchor, task_vectors, Checkpoint, ModuleMeta};
use mergeforge::linalg::Tensor2D;
use mergeforge::merge::{MergeConfig, MergeMode};
use mergeforge::rng;
use mergeforge::Result;

fn random_net(seed: u64) -> Result<Checkpoint> {
    let mut r = rng::rng(seed);
    let mut c = Checkpoint::new();
    for (i, (rows, cols)) in [(16, 8), (16, 16), (4, 16)].into_iter().enumerate() {
        let meta = ModuleMeta {
            name: format!("fc{i}"),
            rows,
            cols,
            block: i.min(1),
            group: if i % 2 == 0 { "mlp-in" } else { "mlp-out" }.into(),
        };
        c.insert_module(meta, Tensor2D::standard_normal(rows, cols, &mut r))?;
        c.insert_aux(format!("fc{i}.bias"), vec![0.0; rows]);
    }
    Ok(c)
}

fn main() -> Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let pre = random_net(0)?;
    pre.save(dir.path().join("pre"))?;
    let back = Checkpoint::load(dir.path().join("pre"))?;
    println!("round trip identical: {}", back == pre);
    println!("cells: {:?}", back.cells().iter().map(|c| c.to_string()).collect::<Vec<_>>());

    let experts: Vec<Checkpoint> = (1..=3)
        .map(|s| {
            let delta = random_net(s)?;
            let mut e = pre.clone();
            for (name, w) in pre.modules() {
                e.set_module(name, w.add_scaled(0.05, delta.module(name)?)?)?;
            }
            Ok(e)
        })
        .collect::<Result<_>>()?;

    let ta = ta_anchor(&pre, &experts, 0.3)?;
    let tvs = task_vectors(&pre, &experts, &ta)?;
    for name in tvs.module_names() {
        let norms: Vec<String> = (0..tvs.task_count())
            .map(|t| format!("{:.3}", tvs.task_vector(name, t).unwrap().frobenius_norm()))
            .collect();
        println!("{name}: task vectors [{}], anchor {:.3}", norms.join(", "), tvs.anchor_vector(name)?.frobenius_norm());
    }

    // merging with U = U⁽⁰⁾ and s = 1 reproduces the anchor
    let cfg = MergeConfig::shared(MergeMode::Assisted, &pre.cells(), 1.0, 1.0);
    let merged = assemble(&pre, &tvs.anchor, &cfg, &ta)?;
    let diff = merged
        .modules()
        .iter()
        .map(|(n, w)| w.max_abs_diff(&ta.modules()[n]))
        .fold(0.0, f64::max);
    println!("assemble(anchor vectors) vs anchor: max diff {diff:.2e}");
    Ok(())
}
