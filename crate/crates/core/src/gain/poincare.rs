//! Spectral-gap bound `int |grad phi|^2 p <= (1/lambda) int |h - hhat|^2 p`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use super::GainField;
use crate::error::{Error, Result};
use crate::numerics::{gaussian_cubature, trapezoid};
use crate::reference::{GaussianBelief, GridDensity1D};

/// Relative slack allowed before the bound counts as violated.
const BOUND_SLACK: f64 = 1e-6;
/// Largest eigenproblem built by [`spectral_gap_1d`].
const MAX_EIGEN_NODES: usize = 600;

/// Both sides of the bound for one observation channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PoincareReport {
    pub lhs: f64,
    pub rhs: f64,
    pub lambda: f64,
    pub satisfied: bool,
}

impl PoincareReport {
    fn new(lhs: f64, variance: f64, lambda: f64) -> Self {
        let rhs = variance / lambda;
        Self {
            lhs,
            rhs,
            lambda,
            satisfied: lhs <= rhs * (1.0 + BOUND_SLACK) + f64::MIN_POSITIVE,
        }
    }
}

/// The density and gain whose bound is checked.
pub enum PoincareInput<'a> {
    /// Grid quadrature; `lambda` must be supplied.
    Grid {
        density: &'a GridDensity1D,
        h: &'a dyn Fn(f64) -> f64,
        gain: &'a GainField,
        lambda: Option<f64>,
    },
    /// Gauss–Hermite cubature under a Gaussian; `lambda` defaults to `1 / lambda_max(Sigma)`.
    Gaussian {
        belief: &'a GaussianBelief,
        h: &'a dyn Fn(&[f64], &mut [f64]),
        gain: &'a GainField,
        lambda: Option<f64>,
    },
}

/// Evaluates both sides of the bound per observation channel.
pub fn poincare_diagnostic(input: PoincareInput<'_>) -> Result<Vec<PoincareReport>> {
    match input {
        PoincareInput::Grid {
            density,
            h,
            gain,
            lambda,
        } => {
            let lambda = lambda.ok_or_else(|| {
                Error::MissingSpectralGap("supply lambda for non-Gaussian densities, e.g. from spectral_gap_1d".into())
            })?;
            let n = density.len();
            let dx = density.dx();
            let p = density.values();
            let mass = trapezoid(p, dx);
            let m = gain.dim_obs();
            let mut k = vec![0.0; m];
            let gains: Vec<f64> = (0..n)
                .flat_map(|i| {
                    gain.evaluate_into(&[density.x(i)], &mut k);
                    k.clone()
                })
                .collect();
            let h_hat = density.expectation(h);
            let var: Vec<f64> = (0..n).map(|i| (h(density.x(i)) - h_hat).powi(2) * p[i]).collect();
            let variance = trapezoid(&var, dx) / mass;
            if m != 1 {
                return Err(Error::Unsupported("grid diagnostics take a single-channel h".into()));
            }
            let energy: Vec<f64> = (0..n).map(|i| gains[i] * gains[i] * p[i]).collect();
            Ok(vec![PoincareReport::new(
                trapezoid(&energy, dx) / mass,
                variance,
                lambda,
            )])
        }
        PoincareInput::Gaussian {
            belief,
            h,
            gain,
            lambda,
        } => {
            let d = belief.dim();
            let lambda = match lambda {
                Some(l) => l,
                None => {
                    let top = SymmetricEigen::new(belief.cov.clone()).eigenvalues.max();
                    if !(top > 0.0) {
                        return Err(Error::MissingSpectralGap(
                            "covariance has no positive eigenvalue".into(),
                        ));
                    }
                    1.0 / top
                }
            };
            let chol = belief
                .cov
                .clone()
                .cholesky()
                .map(|c| c.l())
                .ok_or(Error::NotPositiveDefinite { name: "Sigma" })?;
            let nodes_per_dim = ((4000f64).powf(1.0 / d as f64).floor() as usize).clamp(3, 24);
            let (points, weights) = gaussian_cubature(&belief.mean, &chol, nodes_per_dim);
            let m = gain.dim_obs();
            let mut hv = vec![0.0; m];
            let mut kv = vec![0.0; d * m];
            let hs: Vec<Vec<f64>> = points
                .iter()
                .map(|x| {
                    h(x.as_slice(), &mut hv);
                    hv.clone()
                })
                .collect();
            let h_hat: Vec<f64> = (0..m)
                .map(|j| weights.iter().zip(&hs).map(|(w, hx)| w * hx[j]).sum())
                .collect();
            let mut energy = vec![0.0; m];
            let mut variance = vec![0.0; m];
            for (q, x) in points.iter().enumerate() {
                gain.evaluate_into(x.as_slice(), &mut kv);
                for j in 0..m {
                    energy[j] += weights[q] * (0..d).map(|l| kv[l * m + j].powi(2)).sum::<f64>();
                    variance[j] += weights[q] * (hs[q][j] - h_hat[j]).powi(2);
                }
            }
            Ok((0..m)
                .map(|j| PoincareReport::new(energy[j], variance[j], lambda))
                .collect())
        }
    }
}

/// Smallest non-zero eigenvalue of `-(1/p) (p u')'` with Neumann ends,
/// discretized on (a subsample of) the grid where `p` is non-negligible.
pub fn spectral_gap_1d(density: &GridDensity1D) -> Result<f64> {
    let p = density.values();
    let peak = p.iter().fold(0.0f64, |a, b| a.max(*b));
    let first = p.iter().position(|v| *v > 1e-10 * peak).ok_or(Error::ZeroMass)?;
    let last = p.iter().rposition(|v| *v > 1e-10 * peak).ok_or(Error::ZeroMass)?;
    let stride = ((last - first) / MAX_EIGEN_NODES + 1).max(1);
    let idx: Vec<usize> = (first..=last).step_by(stride).collect();
    let n = idx.len();
    if n < 3 {
        return Err(Error::MissingSpectralGap(
            "density support spans fewer than 3 nodes".into(),
        ));
    }
    let h = density.dx() * stride as f64;
    let pv: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
    let faces: Vec<f64> = pv.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    // Symmetric form M^{-1/2} L M^{-1/2} of the generalized problem L u = lambda M u.
    let mut b = DMatrix::zeros(n, n);
    for (f, &pf) in faces.iter().enumerate() {
        let c = pf / (h * h);
        b[(f, f)] += c / pv[f];
        b[(f + 1, f + 1)] += c / pv[f + 1];
        let off = -c / (pv[f] * pv[f + 1]).sqrt();
        b[(f, f + 1)] = off;
        b[(f + 1, f)] = off;
    }
    let mut eig: Vec<f64> = SymmetricEigen::new(b).eigenvalues.iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig[1])
}
