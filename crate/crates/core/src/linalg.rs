//! Small dense linear-algebra helpers on row-major slices.

use nalgebra::{DMatrix, DVector};

/// `d × n` row-major matrix as an nalgebra matrix.
pub fn matrix(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, data)
}

/// Eigenvalues of `σσ*` in ascending order.
pub fn gram_eigenvalues(sigma: &[f64], d: usize, n: usize) -> Vec<f64> {
    if d == 1 {
        return vec![sigma.iter().map(|x| x * x).sum()];
    }
    let s = matrix(d, n, sigma);
    let g = &s * s.transpose();
    let mut ev: Vec<f64> = g.symmetric_eigen().eigenvalues.iter().cloned().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

/// Solves `(σσ*) u = rhs` and returns `u`, or `None` when `σσ*` is singular
/// relative to `rel_tol`.
pub fn solve_gram(
    sigma: &[f64],
    d: usize,
    n: usize,
    rhs: &[f64],
    rel_tol: f64,
) -> Option<Vec<f64>> {
    if d == 1 {
        let g: f64 = sigma.iter().map(|x| x * x).sum();
        let scale = sigma.iter().map(|x| x.abs()).fold(0.0, f64::max);
        if !(g > rel_tol * scale * scale) || g == 0.0 {
            return None;
        }
        return Some(vec![rhs[0] / g]);
    }
    let s = matrix(d, n, sigma);
    let g = &s * s.transpose();
    let ev = g.clone().symmetric_eigen().eigenvalues;
    let max = ev.iter().cloned().fold(0.0, f64::max);
    let min = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > rel_tol * max) {
        return None;
    }
    let chol = g.cholesky()?;
    let u = chol.solve(&DVector::from_column_slice(rhs));
    Some(u.iter().cloned().collect())
}

/// `σ* u` for a row-major `d × n` matrix.
pub fn transpose_apply(sigma: &[f64], d: usize, n: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..d {
        for j in 0..n {
            out[j] += sigma[i * n + j] * u[i];
        }
    }
    out
}

/// `σ v` for a row-major `d × n` matrix.
pub fn apply(sigma: &[f64], d: usize, n: usize, v: &[f64]) -> Vec<f64> {
    (0..d)
        .map(|i| (0..n).map(|j| sigma[i * n + j] * v[j]).sum())
        .collect()
}

/// Solves the square system `σ x = rhs`.
pub fn solve_square(sigma: &[f64], n: usize, rhs: &[f64]) -> Option<Vec<f64>> {
    if n == 1 {
        if sigma[0] == 0.0 {
            return None;
        }
        return Some(vec![rhs[0] / sigma[0]]);
    }
    let m = matrix(n, n, sigma);
    let x = m.lu().solve(&DVector::from_column_slice(rhs))?;
    Some(x.iter().cloned().collect())
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
