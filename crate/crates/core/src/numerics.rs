//! Small deterministic numeric kernels shared by the solvers.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

const PAIRWISE_BLOCK: usize = 32;

/// Pairwise (cascade) summation with a fixed split order, so the result does
/// not depend on how callers chunk work.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise sum of `f(i)` for `i in 0..n`.
pub fn pairwise_sum_by<F: Fn(usize) -> f64>(n: usize, f: F) -> f64 {
    fn go<F: Fn(usize) -> f64>(lo: usize, hi: usize, f: &F) -> f64 {
        if hi - lo <= PAIRWISE_BLOCK {
            return (lo..hi).map(f).sum();
        }
        let mid = lo + (hi - lo) / 2;
        go(lo, mid, f) + go(mid, hi, f)
    }
    go(0, n, &f)
}

/// Composite trapezoid rule on a uniform grid.
pub fn trapezoid(values: &[f64], dx: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => dx * (pairwise_sum(&values[1..n - 1]) + 0.5 * (values[0] + values[n - 1])),
    }
}

/// Running trapezoid integral from the left end; `out[0] = 0`.
pub fn cumulative_trapezoid(values: &[f64], dx: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in values.windows(2) {
        acc += 0.5 * dx * (w[0] + w[1]);
        out.push(acc);
    }
    out.truncate(values.len());
    out
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut w = theta.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// `(M + M^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, rel_tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.norm().max(f64::MIN_POSITIVE);
    (m - m.transpose()).norm() <= rel_tol * scale
}

/// Gauss–Hermite rule for expectations under the standard normal:
/// `E[f(Z)] ~= sum_i w_i f(z_i)`. Built with the Golub–Welsch eigenvalue method.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut jacobi = DMatrix::zeros(n, n);
    for k in 1..n {
        let off = (k as f64).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Tensor-product Gauss–Hermite nodes for `N(mean, cov)`; returns (points, weights).
pub fn gaussian_cubature(
    mean: &DVector<f64>,
    chol_lower: &DMatrix<f64>,
    nodes_per_dim: usize,
) -> (Vec<DVector<f64>>, Vec<f64>) {
    let d = mean.len();
    let (z, w) = gauss_hermite(nodes_per_dim);
    let total = nodes_per_dim.pow(d as u32);
    let mut points = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; d];
    for _ in 0..total {
        let zs = DVector::from_iterator(d, idx.iter().map(|&i| z[i]));
        points.push(mean + chol_lower * zs);
        weights.push(idx.iter().map(|&i| w[i]).product());
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < nodes_per_dim {
                break;
            }
            *slot = 0;
        }
    }
    (points, weights)
}

pub fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pairwise_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
        assert_eq!(pairwise_sum_by(1000, |i| i as f64), 499_500.0);
    }

    #[test]
    fn trapezoid_is_exact_for_linear() {
        let dx = 0.1;
        let v: Vec<f64> = (0..=10).map(|i| 2.0 * i as f64 * dx + 1.0).collect();
        assert_abs_diff_eq!(trapezoid(&v, dx), 2.0, epsilon = 1e-12);
        let c = cumulative_trapezoid(&v, dx);
        assert_eq!(c.len(), v.len());
        assert_abs_diff_eq!(c[10], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c[5], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.5), 0.5);
        assert_abs_diff_eq!(wrap_angle(-0.5 - 4.0 * PI), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn gauss_hermite_moments() {
        let (z, w) = gauss_hermite(10);
        let m0: f64 = w.iter().sum();
        let m2: f64 = z.iter().zip(&w).map(|(z, w)| w * z * z).sum();
        let m4: f64 = z.iter().zip(&w).map(|(z, w)| w * z.powi(4)).sum();
        assert_abs_diff_eq!(m0, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m2, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m4, 3.0, epsilon = 1e-11);
    }
}
