//! One module merged in closed form from raw activation moments.
//!
//! Two "experts" see different input subspaces; the MAP merge interpolates
//! between the least-squares fit to both (small λ) and the anchor (large λ).

use mergeforge::linalg::Tensor2D;
use mergeforge::merge::stationarity_residual;
use mergeforge::rng;
use mergeforge::stats::{ModuleStats, StatsSource};
use mergeforge::{map_merge, Result};

fn main() -> Result<()> {
    let (d_out, d_in, n) = (3, 6, 40);
    let mut r = rng::rng(7);

    let experts: Vec<Tensor2D> = (0..2).map(|_| Tensor2D::standard_normal(d_out, d_in, &mut r)).collect();
    let inputs: Vec<Tensor2D> = (0..2).map(|_| Tensor2D::standard_normal(d_in, n, &mut r)).collect();

    // G = Σ x xᵀ, C = Σ (U⁽ᵗ⁾x) xᵀ summed over both tasks
    let mut gram = Tensor2D::zeros(d_in, d_in);
    let mut cross = Tensor2D::zeros(d_out, d_in);
    for (u, x) in experts.iter().zip(&inputs) {
        gram.axpy(1.0, &x.gram_rows())?;
        cross.axpy(1.0, &u.matmul(x)?.matmul_nt(x)?)?;
    }
    let stats = ModuleStats {
        gram,
        cross,
        sample_count: 2 * n,
        source: StatsSource::Assisted,
    };

    // task-arithmetic style anchor: the mean of the two task vectors
    let anchor = experts[0].add(&experts[1])?.scale(0.5);

    println!("{:>10}  {:>12}  {:>12}  {:>10}", "lambda", "|U - U0|", "|U - U1|", "residual");
    for lambda in [0.0, 1e-2, 1.0, 1e1, 1e2, 1e3, 1e6] {
        let u = map_merge(&stats, &anchor, lambda)?;
        let res = stationarity_residual(&u, &stats, &anchor, lambda)?;
        println!(
            "{lambda:>10.0e}  {:>12.4}  {:>12.4}  {:>10.2e}",
            u.frobenius_distance(&anchor),
            u.frobenius_distance(&experts[0]),
            res
        );
    }
    Ok(())
}
