#![allow(dead_code)]

use mergeforge::linalg::Tensor2D;
use mergeforge::rng;
use mergeforge::stats::{ModuleStats, StatsSource};

/// Gaussian elimination with partial pivoting on a dense copy; no shared code
/// with the Cholesky path under test.
pub fn gauss_solve(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
    let n = a.rows();
    let k = b.cols();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a.row(i).to_vec();
            row.extend_from_slice(b.row(i));
            row
        })
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs()))
            .unwrap();
        m.swap(col, piv);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            for c in col..n + k {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    let mut x = vec![vec![0.0; k]; n];
    for i in (0..n).rev() {
        for j in 0..k {
            let s: f64 = (i + 1..n).map(|c| m[i][c] * x[c][j]).sum();
            x[i][j] = (m[i][n + j] - s) / m[i][i];
        }
    }
    Tensor2D::from_rows(&x).unwrap()
}

/// Plain gradient descent on `‖Y − UX‖² + λ‖U − U⁽⁰⁾‖²` written in moment
/// form, step `1/(2(‖G‖_F + λ))`, started at the anchor, stopped once the
/// gradient norm reaches `tol`.
pub fn gd_minimizer(stats: &ModuleStats, anchor: &Tensor2D, lambda: f64, tol: f64, max_iter: usize) -> (Tensor2D, usize) {
    let (d_out, d_in) = anchor.shape();
    let step = 1.0 / (2.0 * (stats.gram.frobenius_norm() + lambda));
    let g = stats.gram.data();
    let c = stats.cross.data();
    let u0 = anchor.data();
    let mut u = u0.to_vec();
    let mut grad = vec![0.0; u.len()];
    for it in 0..max_iter {
        let mut norm2 = 0.0;
        for i in 0..d_out {
            for j in 0..d_in {
                let mut ug = 0.0;
                for l in 0..d_in {
                    ug += u[i * d_in + l] * g[l * d_in + j];
                }
                let idx = i * d_in + j;
                let gr = 2.0 * (ug - c[idx] + lambda * (u[idx] - u0[idx]));
                grad[idx] = gr;
                norm2 += gr * gr;
            }
        }
        if norm2.sqrt() <= tol {
            return (Tensor2D::new(d_out, d_in, u).unwrap(), it);
        }
        for (x, gr) in u.iter_mut().zip(&grad) {
            *x -= step * gr;
        }
    }
    (Tensor2D::new(d_out, d_in, u).unwrap(), max_iter)
}

/// Assisted moments of `y = U x` for `n` standard-normal inputs.
pub fn regression_stats(u: &Tensor2D, n: usize, seed: u64) -> ModuleStats {
    let x = Tensor2D::standard_normal(u.cols(), n, &mut rng::rng(seed));
    let y = u.matmul(&x).unwrap();
    ModuleStats {
        gram: x.gram_rows(),
        cross: y.matmul_nt(&x).unwrap(),
        sample_count: n,
        source: StatsSource::Assisted,
    }
}

pub fn random_spd(d: usize, seed: u64) -> Tensor2D {
    let a = Tensor2D::standard_normal(d, d + 2, &mut rng::rng(seed));
    let mut g = a.gram_rows();
    g.add_diag_mut(0.1);
    g
}

pub fn rel_frobenius(a: &Tensor2D, b: &Tensor2D) -> f64 {
    a.frobenius_distance(b) / b.frobenius_norm().max(1e-300)
}
