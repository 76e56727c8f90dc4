//! Dense row-major `f64` matrices and the handful of factorizations the
//! merger needs: jittered Cholesky solves, Frobenius geometry and
//! matrix-normal sampling.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

/// Jitter multipliers (relative to `trace(A)/d`) tried in order when a
/// factorization fails.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Relative asymmetry tolerated by the symmetric solvers.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2D({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor2D {
    /// Build from row-major data. Rejects empty shapes, length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor2D::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty shape {rows}x{cols}");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.data[i * cols + j] = f(i, j);
            }
        }
        out
    }

    /// Build from a slice of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    /// Column vector.
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::new(values.len(), 1, values.to_vec())
    }

    /// Matrix with i.i.d. standard normal entries.
    pub fn standard_normal(rows: usize, cols: usize, rng: &mut rng::Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dims(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    /// `self + alpha * other`, elementwise.
    pub fn add_scaled(&self, alpha: f64, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy(alpha, other)?;
        Ok(out)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.add_scaled(1.0, other)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(-1.0, other)
    }

    /// In place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.scale_mut(factor);
        out
    }

    pub fn scale_mut(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// In place `self += value * I`. Panics on non-square input.
    pub fn add_diag_mut(&mut self, value: f64) {
        assert!(self.is_square(), "add_diag on non-square matrix");
        for i in 0..self.rows {
            self.data[i * self.cols + i] += value;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `Tr(selfᵀ other)`.
    pub fn frobenius_dot(&self, other: &Self) -> Result<f64> {
        self.same_shape(other, "frobenius_dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `‖self − other‖_F`.
    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `‖A − Aᵀ‖_F / ‖A‖_F` (zero for the zero matrix).
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let norm = self.frobenius_norm();
        if norm == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                let d = self[(i, j)] - self[(j, i)];
                acc += d * d;
            }
        }
        acc.sqrt() / norm
    }

    /// Copy the upper triangle onto the lower one.
    pub fn symmetrize_from_upper(&mut self) {
        assert!(self.is_square());
        let n = self.rows;
        for i in 0..n {
            for j in 0..i {
                self.data[i * n + j] = self.data[j * n + i];
            }
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        product(self, false, other, false)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Self) -> Result<Self> {
        product(self, false, other, true)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        product(self, true, other, false)
    }

    /// `self · selfᵀ`, exactly symmetric.
    pub fn gram_rows(&self) -> Self {
        let mut g = product(self, false, self, true).expect("shapes agree");
        g.symmetrize_from_upper();
        g
    }

    /// `selfᵀ · self`, exactly symmetric.
    pub fn gram_cols(&self) -> Self {
        let mut g = product(self, true, self, false).expect("shapes agree");
        g.symmetrize_from_upper();
        g
    }
}

impl Index<(usize, usize)> for Tensor2D {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Tensor2D {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// `C ← alpha · op(A) · op(B) + beta · C` where `op` optionally transposes.
pub fn gemm(
    alpha: f64,
    a: &Tensor2D,
    trans_a: bool,
    b: &Tensor2D,
    trans_b: bool,
    beta: f64,
    c: &mut Tensor2D,
) -> Result<()> {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if k != kb {
        return Err(Error::dims("gemm", format!("inner dim {k}"), kb));
    }
    if c.shape() != (m, n) {
        return Err(Error::dims(
            "gemm",
            format!("{:?}", (m, n)),
            format!("{:?}", c.shape()),
        ));
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: strides and extents were validated against the owning buffers above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
    Ok(())
}

fn product(a: &Tensor2D, trans_a: bool, b: &Tensor2D, trans_b: bool) -> Result<Tensor2D> {
    let m = if trans_a { a.cols } else { a.rows };
    let n = if trans_b { b.rows } else { b.cols };
    let mut c = Tensor2D::zeros(m, n);
    gemm(1.0, a, trans_a, b, trans_b, 0.0, &mut c)?;
    Ok(c)
}

/// Lower Cholesky factor of `A + jitter·I`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    lower: Tensor2D,
    jitter: f64,
}

impl Cholesky {
    /// Factor `A + jitter·I`, escalating the diagonal shift through
    /// [`JITTER_LADDER`] (scaled by `trace(A)/d`) until it succeeds.
    pub fn factor(a: &Tensor2D, jitter: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::dims(
                "cholesky",
                "square matrix",
                format!("{:?}", a.shape()),
            ));
        }
        if !(jitter >= 0.0) || !jitter.is_finite() {
            return Err(Error::OutOfRange(format!("jitter {jitter}")));
        }
        let asym = a.asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        let d = a.rows as f64;
        let base = (a.trace() / d).max(0.0);
        let mut last = jitter;
        for step in JITTER_LADDER {
            let total = jitter + step * base;
            last = total;
            if let Some(lower) = factor_once(a, total) {
                return Ok(Self {
                    lower,
                    jitter: total,
                });
            }
        }
        Err(Error::NotPositiveDefinite { jitter: last })
    }

    /// Total diagonal shift that made the factorization succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn lower(&self) -> &Tensor2D {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    /// Solve `(A + jitter·I) X = B`.
    pub fn solve(&self, b: &Tensor2D) -> Result<Tensor2D> {
        let n = self.dim();
        if b.rows != n {
            return Err(Error::dims("cholesky_solve", format!("{n} rows"), b.rows));
        }
        // Work column-by-column on the transpose so each right-hand side is contiguous.
        let mut xt = b.transpose();
        for r in 0..xt.rows {
            self.solve_in_place(xt.row_mut(r));
        }
        Ok(xt.transpose())
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// `L⁻¹ b`.
    pub fn forward_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.forward(&mut x);
        x
    }

    fn forward(&self, x: &mut [f64]) {
        let l = &self.lower;
        let n = l.rows;
        for i in 0..n {
            let row = l.row(i);
            let s: f64 = row[..i].iter().zip(&x[..i]).map(|(a, b)| a * b).sum();
            x[i] = (x[i] - s) / row[i];
        }
    }

    fn solve_in_place(&self, x: &mut [f64]) {
        self.forward(x);
        let l = &self.lower;
        let n = l.rows;
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
    }

    /// `log det(A + jitter·I)`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.lower[(i, i)].ln()).sum::<f64>()
    }
}

fn factor_once(a: &Tensor2D, shift: f64) -> Option<Tensor2D> {
    let n = a.rows;
    let max_diag = (0..n).map(|i| (a[(i, i)] + shift).abs()).fold(0.0, f64::max);
    let floor = 1e-13 * max_diag;
    let mut l = Tensor2D::zeros(n, n);
    for j in 0..n {
        let mut s = a[(j, j)] + shift;
        for k in 0..j {
            s -= l[(j, k)] * l[(j, k)];
        }
        if !(s > floor) || !s.is_finite() {
            return None;
        }
        let pivot = s.sqrt();
        l[(j, j)] = pivot;
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / pivot;
        }
    }
    Some(l)
}

/// Solve `(A + jitter·I) X = B` for symmetric `A`, escalating jitter when
/// `A + jitter·I` is numerically singular.
pub fn cholesky_solve(a: &Tensor2D, b: &Tensor2D, jitter: f64) -> Result<Tensor2D> {
    if a.rows != b.rows {
        return Err(Error::dims(
            "cholesky_solve",
            format!("B with {} rows", a.rows),
            b.rows,
        ));
    }
    Cholesky::factor(a, jitter)?.solve(b)
}

/// Frobenius cosine `Tr(AᵀB) / (‖A‖_F ‖B‖_F)`.
pub fn frobenius_cos(a: &Tensor2D, b: &Tensor2D) -> Result<f64> {
    let dot = a.frobenius_dot(b)?;
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Draw a matrix whose rows are independent `N(mean_row, row_cov)` vectors.
pub fn sample_matrix_gaussian(mean: &Tensor2D, row_cov: &Tensor2D, seed: u64) -> Result<Tensor2D> {
    if row_cov.shape() != (mean.cols, mean.cols) {
        return Err(Error::dims(
            "sample_matrix_gaussian",
            format!("{0}x{0} row covariance", mean.cols),
            format!("{:?}", row_cov.shape()),
        ));
    }
    let chol = Cholesky::factor(row_cov, 0.0)?;
    let mut rng = rng::rng(seed);
    let z = Tensor2D::standard_normal(mean.rows, mean.cols, &mut rng);
    let mut out = mean.clone();
    gemm(1.0, &z, false, chol.lower(), true, 1.0, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor2D {
        Tensor2D::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_solve_returns_rhs() {
        let b = t(&[&[1.0, -2.0], &[3.5, 0.0], &[0.25, 9.0]]);
        let x = cholesky_solve(&Tensor2D::identity(3), &b, 0.0).unwrap();
        assert!(x.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn two_by_two_solve() {
        // inverse of [[4,2],[2,3]] is [[3,-2],[-2,4]]/8, applied to [8;7]
        let expected = [(3.0 * 8.0 - 2.0 * 7.0) / 8.0, (-2.0 * 8.0 + 4.0 * 7.0) / 8.0];
        assert_eq!(expected, [1.25, 1.5]);
        let a = t(&[&[4.0, 2.0], &[2.0, 3.0]]);
        let x = cholesky_solve(&a, &Tensor2D::column(&[8.0, 7.0]).unwrap(), 0.0).unwrap();
        assert!((x[(0, 0)] - 1.25).abs() < 1e-14);
        assert!((x[(1, 0)] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn jitter_only_system() {
        let x = cholesky_solve(&Tensor2D::zeros(2, 2), &Tensor2D::identity(2), 1.0).unwrap();
        assert!(x.max_abs_diff(&Tensor2D::identity(2)) < 1e-15);
    }

    #[test]
    fn zero_matrix_without_jitter_fails() {
        let err = cholesky_solve(&Tensor2D::zeros(2, 2), &Tensor2D::identity(2), 0.0).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn indefinite_matrix_reports_jitter() {
        let a = t(&[&[1.0, 0.0], &[0.0, -1.0]]);
        match cholesky_solve(&a, &Tensor2D::identity(2), 0.0) {
            Err(Error::NotPositiveDefinite { jitter }) => assert!(jitter >= 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn singular_gram_solved_through_ladder() {
        // rank one: [1,1]ᵀ[1,1]
        let a = t(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let chol = Cholesky::factor(&a, 0.0).unwrap();
        assert!(chol.jitter() > 0.0);
    }

    #[test]
    fn shape_errors() {
        let a = Tensor2D::identity(3);
        let b = Tensor2D::zeros(2, 2);
        assert!(matches!(
            cholesky_solve(&a, &b, 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
        let asym = t(&[&[1.0, 0.5], &[0.0, 1.0]]);
        assert!(matches!(
            cholesky_solve(&asym, &Tensor2D::identity(2), 0.0),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn frobenius_cos_cases() {
        let i2 = Tensor2D::identity(2);
        assert!((frobenius_cos(&i2, &i2).unwrap() - 1.0).abs() < 1e-15);
        let refl = Tensor2D::diag(&[1.0, -1.0]);
        assert_eq!(frobenius_cos(&i2, &refl).unwrap(), 0.0);
        assert!((frobenius_cos(&i2, &i2.scale(-1.0)).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            frobenius_cos(&i2, &Tensor2D::zeros(2, 2)),
            Err(Error::ZeroMatrix)
        ));
    }

    #[test]
    fn frobenius_cos_scale_invariant() {
        let mut r = rng::rng(3);
        let a = Tensor2D::standard_normal(4, 4, &mut r);
        let b = Tensor2D::standard_normal(4, 4, &mut r);
        let direct = a.frobenius_dot(&b).unwrap() / (a.frobenius_norm() * b.frobenius_norm());
        let scaled = frobenius_cos(&a.scale(3.0), &b).unwrap();
        assert!((scaled - direct).abs() < 1e-14);
    }

    #[test]
    fn degenerate_covariance_sample_equals_mean() {
        let mean = t(&[&[1.0, 2.0, 3.0], &[-1.0, 0.0, 4.0]]);
        let cov = Tensor2D::identity(3).scale(1e-300);
        let s = sample_matrix_gaussian(&mean, &cov, 11).unwrap();
        assert!(s.max_abs_diff(&mean) <= 1e-10);
    }

    #[test]
    fn sampling_is_deterministic() {
        let mean = Tensor2D::zeros(3, 2);
        let cov = t(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let a = sample_matrix_gaussian(&mean, &cov, 5).unwrap();
        let b = sample_matrix_gaussian(&mean, &cov, 5).unwrap();
        assert_eq!(a.data(), b.data());
        let c = sample_matrix_gaussian(&mean, &cov, 6).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn empirical_row_covariance() {
        let n = 10_000;
        let mean = Tensor2D::zeros(n, 2);
        let cov = t(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let s = sample_matrix_gaussian(&mean, &cov, 42).unwrap();
        let emp = s.gram_cols().scale(1.0 / n as f64);
        for i in 0..2 {
            for j in 0..2 {
                let rel = (emp[(i, j)] - cov[(i, j)]).abs() / cov[(i, j)];
                assert!(rel < 0.05, "entry ({i},{j}) = {}", emp[(i, j)]);
            }
        }
    }

    #[test]
    fn products_agree_with_naive() {
        let mut r = rng::rng(9);
        let a = Tensor2D::standard_normal(5, 3, &mut r);
        let b = Tensor2D::standard_normal(4, 3, &mut r);
        let naive = Tensor2D::from_fn(5, 4, |i, j| (0..3).map(|k| a[(i, k)] * b[(j, k)]).sum());
        assert!(a.matmul_nt(&b).unwrap().max_abs_diff(&naive) < 1e-12);
        assert!(a.matmul(&b.transpose()).unwrap().max_abs_diff(&naive) < 1e-12);
        let tn = a.matmul_tn(&a).unwrap();
        assert!(tn.max_abs_diff(&a.gram_cols()) < 1e-12);
        assert_eq!(a.gram_rows().asymmetry(), 0.0);
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(Tensor2D::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Tensor2D::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Tensor2D::new(0, 1, vec![]).is_err());
    }
}
