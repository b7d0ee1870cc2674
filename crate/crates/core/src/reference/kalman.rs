//! Kalman–Bucy mean and Riccati recursion, in exact-linear and
//! linearized-about-truth forms.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{dimension, invalid, Error, Result};
use crate::models::{ChannelKind, DynamicsModel};
use crate::numerics::{is_symmetric, symmetrize, wrap_angle};
use crate::sde::TruthPath;

/// Eigenvalues below this count as a loss of positive semidefiniteness.
const PSD_TOLERANCE: f64 = -1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(dimension(
                "cov",
                format!("expected {d}x{d}, got {}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        if !is_symmetric(&cov, 1e-10) {
            return Err(Error::NotSymmetric { name: "cov" });
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Noise covariances and the observation map used by one Kalman–Bucy step.
struct StepParts<'a> {
    a: &'a DMatrix<f64>,
    h: &'a DMatrix<f64>,
    q: &'a DMatrix<f64>,
    r_inv: &'a DMatrix<f64>,
}

fn riccati_update(
    belief: &GaussianBelief,
    parts: &StepParts<'_>,
    innovation: &DVector<f64>,
    dt: f64,
) -> Result<GaussianBelief> {
    let sigma = &belief.cov;
    let gain = sigma * parts.h.transpose() * parts.r_inv;
    let mean = &belief.mean + parts.a * &belief.mean * dt + &gain * innovation;
    let dsigma = parts.a * sigma + sigma * parts.a.transpose() + parts.q - &gain * parts.h * sigma;
    let cov = symmetrize(&(sigma + dsigma * dt));
    let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
    if min_eig < PSD_TOLERANCE || !min_eig.is_finite() {
        return Err(Error::Unstable { min_eig });
    }
    Ok(GaussianBelief { mean, cov })
}

/// One Euler step of the Kalman–Bucy filter with unit noise intensities:
/// `mu += A mu dt + Sigma H^T (dZ - H mu dt)`,
/// `Sigma += (A Sigma + Sigma A^T + I - Sigma H^T H Sigma) dt`, then symmetrized.
pub fn kalman_bucy_step(
    belief: &GaussianBelief,
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    dz: &[f64],
    dt: f64,
) -> Result<GaussianBelief> {
    let d = belief.dim();
    let m = h.nrows();
    kalman_bucy_step_general(belief, a, h, &DMatrix::identity(d, d), &DMatrix::identity(m, m), dz, dt)
}

/// Kalman–Bucy step with process covariance `Q` and inverse observation covariance `R^{-1}`.
pub fn kalman_bucy_step_general(
    belief: &GaussianBelief,
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    dz: &[f64],
    dt: f64,
) -> Result<GaussianBelief> {
    let d = belief.dim();
    let m = h.nrows();
    if !(dt > 0.0) {
        return Err(invalid("dt", "must be positive"));
    }
    if a.nrows() != d || a.ncols() != d {
        return Err(dimension("A", format!("expected {d}x{d}")));
    }
    if h.ncols() != d {
        return Err(dimension(
            "H",
            format!("expected m x {d}, got {}x{}", h.nrows(), h.ncols()),
        ));
    }
    if dz.len() != m || q.shape() != (d, d) || r_inv.shape() != (m, m) {
        return Err(dimension("kalman_bucy_step", "dZ, Q or R^{-1} has the wrong shape"));
    }
    let innovation = DVector::from_column_slice(dz) - h * &belief.mean * dt;
    riccati_update(belief, &StepParts { a, h, q, r_inv }, &innovation, dt)
}

/// How the filter obtains an observation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Linearization {
    /// Exact linear observations (`h(x) = H x`).
    Exact,
    /// Jacobian of `h` at the true state, with the innovation
    /// `dZ - (h(X) + H (mu - X)) dt` wrapped on angle channels.
    AboutTruth,
}

/// Per-step beliefs of a Kalman–Bucy run.
#[derive(Clone, Debug)]
pub struct GaussianTrace {
    pub times: Vec<f64>,
    pub beliefs: Vec<GaussianBelief>,
}

impl GaussianTrace {
    pub fn means(&self) -> Vec<Vec<f64>> {
        self.beliefs.iter().map(|b| b.mean.iter().copied().collect()).collect()
    }
}

/// Runs the Kalman–Bucy filter along `truth`, starting from the model's initial law.
///
/// The model must carry a linear drift matrix. With [`Linearization::Exact`]
/// it must also carry a linear observation matrix; otherwise it needs an
/// observation Jacobian.
pub fn run_kalman_bucy(
    model: &DynamicsModel,
    truth: &TruthPath,
    linearization: Linearization,
) -> Result<GaussianTrace> {
    let a = model
        .linear_drift()
        .ok_or_else(|| Error::Unsupported("the Kalman-Bucy filter needs a linear drift".into()))?
        .clone();
    let q = model.process_covariance();
    let r = model.obs_covariance();
    let r_inv = r
        .try_inverse()
        .ok_or_else(|| invalid("obs_noise", "observation covariance is singular"))?;
    let initial = model.initial();
    let mut belief = GaussianBelief::new(initial.mean(), initial.cov())?;
    let dt = truth.grid.dt;
    let m = model.dim_obs();
    let mut trace = GaussianTrace {
        times: Vec::with_capacity(truth.steps()),
        beliefs: Vec::with_capacity(truth.steps()),
    };
    for k in 0..truth.steps() {
        belief = match linearization {
            Linearization::Exact => {
                let h = model
                    .linear_obs()
                    .ok_or_else(|| Error::Unsupported("exact Kalman-Bucy needs a linear observation".into()))?;
                let innovation = DVector::from_column_slice(&truth.dz[k]) - h * &belief.mean * dt;
                riccati_update(
                    &belief,
                    &StepParts {
                        a: &a,
                        h,
                        q: &q,
                        r_inv: &r_inv,
                    },
                    &innovation,
                    dt,
                )?
            }
            Linearization::AboutTruth => {
                let x = truth.state_before(k);
                let h = model
                    .obs_jacobian(x)
                    .ok_or_else(|| Error::Unsupported("linearization needs an observation Jacobian".into()))?;
                let hx = model.observe_vec(x);
                let offset = &h * (&belief.mean - DVector::from_column_slice(x));
                let innovation = DVector::from_iterator(
                    m,
                    (0..m).map(|j| {
                        let raw = truth.dz[k][j] - (hx[j] + offset[j]) * dt;
                        match model.channels()[j] {
                            ChannelKind::Linear => raw,
                            ChannelKind::Angle => wrap_angle(raw / dt) * dt,
                        }
                    }),
                );
                riccati_update(
                    &belief,
                    &StepParts {
                        a: &a,
                        h: &h,
                        q: &q,
                        r_inv: &r_inv,
                    },
                    &innovation,
                    dt,
                )?
            }
        };
        trace.times.push(truth.times[k]);
        trace.beliefs.push(belief.clone());
    }
    Ok(trace)
}

/// Stationary posterior variance of the scalar Riccati equation
/// `2 a s + q - s^2 h^2 / r = 0`.
pub fn scalar_stationary_variance(a: f64, h: f64, q: f64, r: f64) -> f64 {
    if h == 0.0 {
        return -q / (2.0 * a);
    }
    let c = h * h / r;
    (a + (a * a + c * q).sqrt()) / c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_linear_model, BearingOnlyScenario};
    use crate::sde::{simulate_truth, TimeGrid};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn belief(mu: f64, s: f64) -> GaussianBelief {
        GaussianBelief::new(DVector::from_element(1, mu), scalar(s)).unwrap()
    }

    #[test]
    fn riccati_fixed_point_is_stationary() {
        let b = kalman_bucy_step(&belief(0.3, 1.0), &scalar(0.0), &scalar(1.0), &[0.01], 0.01).unwrap();
        assert_eq!(b.cov[(0, 0)], 1.0);
    }

    #[test]
    fn exact_prediction_means_no_correction() {
        let (mu, dt, a) = (0.7, 0.01, -0.4);
        let b = kalman_bucy_step(&belief(mu, 2.0), &scalar(a), &scalar(1.0), &[mu * dt], dt).unwrap();
        assert!((b.mean[0] - (mu + a * mu * dt)).abs() < 1e-15);
    }

    #[test]
    fn stationary_variance_for_a_minus_one() {
        let mut b = belief(0.0, 3.0);
        for _ in 0..20_000 {
            b = kalman_bucy_step(&b, &scalar(-1.0), &scalar(1.0), &[0.0], 1e-3).unwrap();
        }
        let target = 2f64.sqrt() - 1.0;
        assert!((b.cov[(0, 0)] - target).abs() < 1e-4);
        assert!((scalar_stationary_variance(-1.0, 1.0, 1.0, 1.0) - target).abs() < 1e-15);
    }

    #[test]
    fn riccati_monotone_toward_fixed_point() {
        for start in [0.2, 3.0] {
            let mut b = belief(0.0, start);
            let mut prev = start;
            for _ in 0..5000 {
                b = kalman_bucy_step(&b, &scalar(0.0), &scalar(1.0), &[0.0], 1e-3).unwrap();
                let s = b.cov[(0, 0)];
                assert!((s - 1.0).abs() <= (prev - 1.0).abs());
                if start < 1.0 {
                    assert!(s >= prev);
                } else {
                    assert!(s <= prev);
                }
                prev = s;
            }
        }
    }

    #[test]
    fn instability_is_reported() {
        let err = kalman_bucy_step(&belief(0.0, 10.0), &scalar(0.0), &scalar(1.0), &[0.0], 1.0).unwrap_err();
        assert!(matches!(err, Error::Unstable { .. }));
    }

    #[test]
    fn asymmetric_covariance_is_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(GaussianBelief::new(DVector::zeros(2), cov).is_err());
    }

    #[test]
    fn run_matches_manual_steps() {
        let model = build_linear_model(scalar(-0.5), scalar(1.0), DVector::from_element(1, 0.0), scalar(1.0)).unwrap();
        let truth = simulate_truth(&model, TimeGrid::new(0.0, 0.01, 50).unwrap(), 2).unwrap();
        let trace = run_kalman_bucy(&model, &truth, Linearization::Exact).unwrap();
        let mut b = belief(0.0, 1.0);
        for k in 0..50 {
            b = kalman_bucy_step(&b, &scalar(-0.5), &scalar(1.0), &truth.dz[k], 0.01).unwrap();
        }
        assert!((trace.beliefs[49].mean[0] - b.mean[0]).abs() < 1e-14);
        assert!((trace.beliefs[49].cov[(0, 0)] - b.cov[(0, 0)]).abs() < 1e-14);
    }

    #[test]
    fn linearized_filter_tracks_bearing_target() {
        let scenario = BearingOnlyScenario::default_scenario();
        let model = scenario.to_model().unwrap();
        let truth = simulate_truth(&model, TimeGrid::new(0.0, 0.01, 1000).unwrap(), 1).unwrap();
        let trace = run_kalman_bucy(&model, &truth, Linearization::AboutTruth).unwrap();
        let last = &trace.beliefs[999];
        let x = &truth.states[999];
        let err = ((last.mean[0] - x[0]).powi(2) + (last.mean[2] - x[2]).powi(2)).sqrt();
        assert!(err.is_finite() && err < 5.0, "final position error {err}");
    }
}
