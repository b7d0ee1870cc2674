//! Gain functions `K(x) = grad phi(x)` and the solvers that produce them.

mod dns;
mod galerkin;
mod poincare;
mod smoluchowski;

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

pub use dns::{dns_gain_1d, weighted_l2_error, PoissonSolution1D};
pub(crate) use galerkin::assemble_particle_residuals;
pub use galerkin::{
    assemble_galerkin, galerkin_gain, solve_galerkin, DegeneracyWarning, GalerkinBasis1D, GalerkinSolution,
    GalerkinSource, GalerkinSystem, TestFunctions,
};
pub use poincare::{poincare_diagnostic, spectral_gap_1d, PoincareInput, PoincareReport};
pub use smoluchowski::{smoluchowski_phi_mc, SmoluchowskiEstimate, SmoluchowskiSpec};

use crate::error::{dimension, invalid, Error, Result};
use crate::numerics::{is_symmetric, pairwise_sum_by};

type GainFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A gain function `x -> K(x)` with values in `d x m` matrices, stored row-major
/// when written into flat buffers (`out[l * m + j] = K_lj`).
#[derive(Clone)]
pub enum GainField {
    Kalman(DMatrix<f64>),
    Constant(DMatrix<f64>),
    /// Piecewise-constant scalar-state gain: `kappa[j][l]` on `[a_{l}, a_{l+1})`
    /// for channel `j`, zero outside `[a_0, a_L)`.
    Galerkin1d {
        nodes: Vec<f64>,
        kappa: Vec<Vec<f64>>,
    },
    /// Tabulated scalar-state gain, linearly interpolated and clamped to the end values.
    Grid1d {
        lower: f64,
        dx: f64,
        values: Vec<Vec<f64>>,
    },
    /// Arbitrary evaluator.
    Custom {
        dim_state: usize,
        dim_obs: usize,
        f: GainFn,
    },
}

impl fmt::Debug for GainField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Kalman(k) => f.debug_tuple("Kalman").field(k).finish(),
            Self::Constant(k) => f.debug_tuple("Constant").field(k).finish(),
            Self::Galerkin1d { nodes, kappa } => f
                .debug_struct("Galerkin1d")
                .field("nodes", nodes)
                .field("kappa", kappa)
                .finish(),
            Self::Grid1d { lower, dx, values } => f
                .debug_struct("Grid1d")
                .field("lower", lower)
                .field("dx", dx)
                .field("nodes", &values.first().map_or(0, Vec::len))
                .finish(),
            Self::Custom { dim_state, dim_obs, .. } => f
                .debug_struct("Custom")
                .field("dim_state", dim_state)
                .field("dim_obs", dim_obs)
                .finish_non_exhaustive(),
        }
    }
}

impl GainField {
    pub fn custom(dim_state: usize, dim_obs: usize, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self::Custom {
            dim_state,
            dim_obs,
            f: Arc::new(f),
        }
    }

    pub fn dim_state(&self) -> usize {
        match self {
            Self::Kalman(k) | Self::Constant(k) => k.nrows(),
            Self::Galerkin1d { .. } | Self::Grid1d { .. } => 1,
            Self::Custom { dim_state, .. } => *dim_state,
        }
    }

    pub fn dim_obs(&self) -> usize {
        match self {
            Self::Kalman(k) | Self::Constant(k) => k.ncols(),
            Self::Galerkin1d { kappa, .. } => kappa.len(),
            Self::Grid1d { values, .. } => values.len(),
            Self::Custom { dim_obs, .. } => *dim_obs,
        }
    }

    /// True when `K` does not depend on `x`.
    pub fn is_constant(&self) -> bool {
        matches!(self, Self::Kalman(_) | Self::Constant(_))
    }

    /// Writes `K(x)` row-major into `out` (length `d * m`).
    pub fn evaluate_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Kalman(k) | Self::Constant(k) => {
                let m = k.ncols();
                for l in 0..k.nrows() {
                    for j in 0..m {
                        out[l * m + j] = k[(l, j)];
                    }
                }
            }
            Self::Galerkin1d { nodes, kappa } => {
                let cell = galerkin::cell_index(nodes, x[0]);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = cell.map_or(0.0, |c| kappa[j][c]);
                }
            }
            Self::Grid1d { lower, dx, values } => {
                let n = values[0].len();
                let s = ((x[0] - lower) / dx).clamp(0.0, (n - 1) as f64);
                let i = (s.floor() as usize).min(n - 2);
                let w = s - i as f64;
                for (j, o) in out.iter_mut().enumerate() {
                    *o = (1.0 - w) * values[j][i] + w * values[j][i + 1];
                }
            }
            Self::Custom { f, .. } => f(x, out),
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> DMatrix<f64> {
        let (d, m) = (self.dim_state(), self.dim_obs());
        let mut flat = vec![0.0; d * m];
        self.evaluate_into(x, &mut flat);
        DMatrix::from_row_slice(d, m, &flat)
    }

    /// Whether `x` lies where the field is defined without extrapolation.
    pub fn in_support(&self, x: &[f64]) -> bool {
        match self {
            Self::Grid1d { lower, dx, values } => {
                let upper = lower + dx * (values[0].len() - 1) as f64;
                x[0] >= *lower && x[0] <= upper
            }
            _ => true,
        }
    }

    /// CSV `cell_left, cell_right, kappa` for the piecewise-constant variant
    /// (one `kappa_j` column per channel), or `x, K` samples for grid tables.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::Io(e.into());
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        match self {
            Self::Galerkin1d { nodes, kappa } => {
                let mut header = vec!["cell_left".to_string(), "cell_right".to_string()];
                header.extend(channel_names("kappa", kappa.len()));
                w.write_record(&header).map_err(io)?;
                for l in 0..nodes.len() - 1 {
                    let mut row = vec![nodes[l].to_string(), nodes[l + 1].to_string()];
                    row.extend(kappa.iter().map(|k| k[l].to_string()));
                    w.write_record(&row).map_err(io)?;
                }
            }
            Self::Grid1d { lower, dx, values } => {
                let mut header = vec!["x".to_string()];
                header.extend(channel_names("K", values.len()));
                w.write_record(&header).map_err(io)?;
                for i in 0..values[0].len() {
                    let mut row = vec![(lower + i as f64 * dx).to_string()];
                    row.extend(values.iter().map(|v| v[i].to_string()));
                    w.write_record(&row).map_err(io)?;
                }
            }
            _ => {
                return Err(Error::Unsupported(
                    "only one-dimensional gains are written as profiles".into(),
                ))
            }
        }
        Ok(w.flush()?)
    }
}

fn channel_names(base: &str, m: usize) -> Vec<String> {
    if m == 1 {
        vec![base.to_string()]
    } else {
        (1..=m).map(|j| format!("{base}_{j}")).collect()
    }
}

/// Scales a row-major gain in place so its Frobenius norm is at most `k_max`.
pub fn clip_gain(k: &mut [f64], k_max: f64) {
    let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > k_max {
        let s = k_max / norm;
        k.iter_mut().for_each(|v| *v *= s);
    }
}

/// `K = Sigma H^T`.
pub fn kalman_gain(sigma: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<GainField> {
    let d = sigma.nrows();
    if sigma.ncols() != d {
        return Err(dimension(
            "Sigma",
            format!("expected square, got {}x{}", d, sigma.ncols()),
        ));
    }
    if h.ncols() != d {
        return Err(dimension(
            "H",
            format!("expected m x {d}, got {}x{}", h.nrows(), h.ncols()),
        ));
    }
    if !is_symmetric(sigma, 1e-10) {
        return Err(Error::NotSymmetric { name: "Sigma" });
    }
    Ok(GainField::Kalman(sigma * h.transpose()))
}

/// Constant-gain approximation `kappa = (1/N) sum_i (h(X^i) - hhat) X^i^T`,
/// arranged `d x m`. `states` is `N x d` and `h_values` is `N x m`, both row-major.
///
/// The state is centred before the product; this is the same quantity in
/// exact arithmetic and keeps `h` constant giving exactly zero.
pub fn constant_gain(states: &[f64], dim_state: usize, h_values: &[f64], dim_obs: usize) -> Result<GainField> {
    let n = check_ensemble(states, dim_state, h_values, dim_obs)?;
    let mean = |buf: &[f64], width: usize, c: usize| pairwise_sum_by(n, |i| buf[i * width + c]) / n as f64;
    let h_hat: Vec<f64> = (0..dim_obs).map(|j| mean(h_values, dim_obs, j)).collect();
    let mu: Vec<f64> = (0..dim_state).map(|l| mean(states, dim_state, l)).collect();
    Ok(GainField::Constant(DMatrix::from_fn(dim_state, dim_obs, |l, j| {
        pairwise_sum_by(n, |i| {
            (h_values[i * dim_obs + j] - h_hat[j]) * (states[i * dim_state + l] - mu[l])
        }) / n as f64
    })))
}

/// Constant gain from precomputed residuals `h(X^i) - hhat` (used when `hhat`
/// is a circular mean on angle channels).
pub fn constant_gain_from_residuals(
    states: &[f64],
    dim_state: usize,
    residuals: &[f64],
    dim_obs: usize,
) -> Result<GainField> {
    let n = check_ensemble(states, dim_state, residuals, dim_obs)?;
    let mu: Vec<f64> = (0..dim_state)
        .map(|l| pairwise_sum_by(n, |i| states[i * dim_state + l]) / n as f64)
        .collect();
    Ok(GainField::Constant(DMatrix::from_fn(dim_state, dim_obs, |l, j| {
        pairwise_sum_by(n, |i| residuals[i * dim_obs + j] * (states[i * dim_state + l] - mu[l])) / n as f64
    })))
}

fn check_ensemble(states: &[f64], d: usize, h: &[f64], m: usize) -> Result<usize> {
    if d == 0 || m == 0 || !states.len().is_multiple_of(d) || !h.len().is_multiple_of(m) {
        return Err(invalid(
            "ensemble",
            "state and observation widths must be positive divisors",
        ));
    }
    let n = states.len() / d;
    if h.len() / m != n {
        return Err(dimension("h_values", format!("expected {n} rows, got {}", h.len() / m)));
    }
    if n < 2 {
        return Err(Error::TooFewParticles { needed: 2, got: n });
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{NoiseStream, Purpose, StreamId};
    use proptest::prelude::*;

    #[test]
    fn kalman_gain_examples() {
        let k = kalman_gain(&DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(k.evaluate(&[3.0, -1.0]), DMatrix::identity(2, 2));
        let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0]));
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let k = kalman_gain(&sigma, &h).unwrap();
        assert_eq!(k.evaluate(&[0.0, 0.0]), DMatrix::from_column_slice(2, 1, &[2.0, 0.0]));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(kalman_gain(&asym, &h), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn linear_potential_has_kalman_gradient() {
        // phi(x) = sum_k [Sigma H^T]_k (x_k - mu_k) has gradient Sigma H^T.
        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let h = DMatrix::from_row_slice(1, 2, &[0.5, -1.0]);
        let k = kalman_gain(&sigma, &h).unwrap().evaluate(&[0.0, 0.0]);
        let mu = [0.2, -0.4];
        let phi = |x: &[f64]| (0..2).map(|i| k[(i, 0)] * (x[i] - mu[i])).sum::<f64>();
        for i in 0..2 {
            let mut xp = [0.7, 1.1];
            let mut xm = xp;
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            assert!(((phi(&xp) - phi(&xm)) / 2e-6 - k[(i, 0)]).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_gain_examples() {
        let k = constant_gain(&[-1.0, 0.0, 1.0], 1, &[-1.0, 0.0, 1.0], 1).unwrap();
        assert!((k.evaluate(&[0.0])[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        let k = constant_gain(&[-1.0, 0.5, 2.0], 1, &[4.0, 4.0, 4.0], 1).unwrap();
        assert_eq!(k.evaluate(&[0.0])[(0, 0)], 0.0);
        assert!(matches!(
            constant_gain(&[1.0], 1, &[1.0], 1),
            Err(Error::TooFewParticles { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn constant_gain_standard_normal() {
        let mut s = NoiseStream::new(9, StreamId::new(Purpose::Sampling, 0), 1);
        let x: Vec<f64> = (0..100_000)
            .map(|_| {
                let mut z = [0.0];
                s.next_standard_normals(&mut z);
                z[0]
            })
            .collect();
        let k = constant_gain(&x, 1, &x, 1).unwrap().evaluate(&[0.0])[(0, 0)];
        assert!((k - 1.0).abs() < 0.02, "{k}");
    }

    #[test]
    fn grid_gain_interpolates_and_clamps() {
        let g = GainField::Grid1d {
            lower: 0.0,
            dx: 1.0,
            values: vec![vec![0.0, 2.0, 4.0]],
        };
        assert_eq!(g.evaluate(&[0.5])[(0, 0)], 1.0);
        assert_eq!(g.evaluate(&[10.0])[(0, 0)], 4.0);
        assert_eq!(g.evaluate(&[-3.0])[(0, 0)], 0.0);
        assert!(!g.in_support(&[2.5]));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut k = vec![3.0, 4.0];
        clip_gain(&mut k, 1.0);
        assert!((k[0] - 0.6).abs() < 1e-15 && (k[1] - 0.8).abs() < 1e-15);
        let mut small = vec![0.1];
        clip_gain(&mut small, 1.0);
        assert_eq!(small, vec![0.1]);
    }

    proptest! {
        #[test]
        fn constant_gain_ignores_offsets_in_h(
            xs in proptest::collection::vec(-5.0f64..5.0, 3..40),
            c in -100.0f64..100.0,
            shift in -10.0f64..10.0,
        ) {
            let h: Vec<f64> = xs.iter().map(|x| x * x).collect();
            let hc: Vec<f64> = h.iter().map(|v| v + c).collect();
            let base = constant_gain(&xs, 1, &h, 1).unwrap().evaluate(&[0.0])[(0, 0)];
            let offset = constant_gain(&xs, 1, &hc, 1).unwrap().evaluate(&[0.0])[(0, 0)];
            prop_assert!((base - offset).abs() <= 1e-9 * (1.0 + base.abs()));
            // Shift equivariance: translating particles and h leaves kappa unchanged.
            let moved: Vec<f64> = xs.iter().map(|x| x + shift).collect();
            let h_moved: Vec<f64> = moved.iter().map(|x| (x - shift) * (x - shift)).collect();
            let shifted = constant_gain(&moved, 1, &h_moved, 1).unwrap().evaluate(&[0.0])[(0, 0)];
            prop_assert!((base - shifted).abs() <= 1e-9 * (1.0 + base.abs()));
        }
    }
}
