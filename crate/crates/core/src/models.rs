//! Filtering problem definitions: signal drift, observation function, noise
//! scales and initial densities. No solver logic lives here.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dimension, invalid, Error, Result};
use crate::numerics::{is_symmetric, wrap_angle};
use crate::sde::standard_normal_pair;

/// A map `R^d -> R^k` evaluated into a caller-provided buffer.
pub trait VectorField: Send + Sync {
    fn eval(&self, x: &[f64], out: &mut [f64]);
}

impl<F> VectorField for F
where
    F: Fn(&[f64], &mut [f64]) + Send + Sync,
{
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        self(x, out)
    }
}

/// `x -> M x`.
#[derive(Clone, Debug)]
pub struct LinearMap(pub DMatrix<f64>);

impl VectorField for LinearMap {
    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let m = &self.0;
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..m.ncols()).map(|c| m[(r, c)] * x[c]).sum();
        }
    }
}

/// How an observation channel's differences are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Linear,
    /// Angles in radians; differences are wrapped to `(-pi, pi]`.
    Angle,
}

/// Scalar polynomial with coefficients in ascending powers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polynomial {
    pub coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Self { coeffs }
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    pub fn derivative(&self) -> Polynomial {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, c)| k as f64 * c)
            .collect();
        Polynomial { coeffs }
    }
}

/// One-dimensional Gaussian mixture `sum_j w_j N(mu_j, var_j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureRaw")]
pub struct MixtureDensity1D {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureRaw {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl TryFrom<MixtureRaw> for MixtureDensity1D {
    type Error = Error;
    fn try_from(raw: MixtureRaw) -> Result<Self> {
        MixtureDensity1D::new(raw.weights, raw.means, raw.variances)
    }
}

impl MixtureDensity1D {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        let j = weights.len();
        if j == 0 {
            return Err(invalid("weights", "mixture needs at least one component"));
        }
        if means.len() != j || variances.len() != j {
            return Err(dimension(
                "means/variances",
                format!(
                    "expected {j} components, got {} means and {} variances",
                    means.len(),
                    variances.len()
                ),
            ));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(invalid("weights", "weights must be positive"));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(invalid("weights", "weights must sum to 1 (within 1e-12)"));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(invalid("variances", "variances must be positive"));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(invalid("means", "means must be finite"));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// Trimodal benchmark mixture: weights (0.3, 0.4, 0.3), means (-1, 0, 1),
    /// variances 0.2 each.
    pub fn default_benchmark() -> Self {
        Self::new(vec![0.3, 0.4, 0.3], vec![-1.0, 0.0, 1.0], vec![0.2, 0.2, 0.2]).expect("benchmark mixture is valid")
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.iter()
            .map(|(w, m, v)| w * (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt())
            .sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.iter()
            .map(|(w, m, v)| w * 0.5 * statrs::function::erf::erfc(-(x - m) / (2.0 * v).sqrt()))
            .sum()
    }

    /// `-log p(x)`, computed with a log-sum-exp so tails stay finite.
    pub fn neg_log_pdf(&self, x: f64) -> f64 {
        let logs: Vec<f64> = self
            .iter()
            .map(|(w, m, v)| w.ln() - 0.5 * (2.0 * PI * v).ln() - (x - m).powi(2) / (2.0 * v))
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        -(top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln())
    }

    /// `d/dx [-log p(x)]`, i.e. the Smoluchowski drift with the sign flipped.
    pub fn grad_neg_log_pdf(&self, x: f64) -> f64 {
        let logs: Vec<f64> = self
            .iter()
            .map(|(w, m, v)| w.ln() - 0.5 * v.ln() - (x - m).powi(2) / (2.0 * v))
            .collect();
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut num = 0.0;
        let mut den = 0.0;
        for ((l, m), v) in logs.iter().zip(&self.means).zip(&self.variances) {
            let r = (l - top).exp();
            num += r * (x - m) / v;
            den += r;
        }
        num / den
    }

    pub fn mean(&self) -> f64 {
        self.iter().map(|(w, m, _)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let mu = self.mean();
        self.iter().map(|(w, m, v)| w * (v + (m - mu).powi(2))).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = j;
                break;
            }
        }
        let (z, _) = standard_normal_pair(rng);
        self.means[pick] + self.variances[pick].sqrt() * z
    }

    fn iter(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), v)| (*w, *m, *v))
    }
}

/// Law of the initial state.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialDensitySpec {
    Gaussian {
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        chol: DMatrix<f64>,
    },
    Mixture1d(MixtureDensity1D),
}

impl InitialDensitySpec {
    pub fn gaussian(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(dimension(
                "initial_cov",
                format!("expected {d}x{d}, got {}x{}", cov.nrows(), cov.ncols()),
            ));
        }
        let chol = spd_cholesky(&cov, "initial_cov")?;
        Ok(Self::Gaussian { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian { mean, .. } => mean.len(),
            Self::Mixture1d(_) => 1,
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            Self::Gaussian { mean, .. } => mean.clone(),
            Self::Mixture1d(m) => DVector::from_element(1, m.mean()),
        }
    }

    pub fn cov(&self) -> DMatrix<f64> {
        match self {
            Self::Gaussian { cov, .. } => cov.clone(),
            Self::Mixture1d(m) => DMatrix::from_element(1, 1, m.variance()),
        }
    }

    /// Draws one state into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        match self {
            Self::Gaussian { mean, chol, .. } => {
                let d = mean.len();
                let mut z = vec![0.0; d];
                fill_standard_normals(rng, &mut z);
                for (r, o) in out.iter_mut().enumerate().take(d) {
                    *o = mean[r] + (0..=r).map(|c| chol[(r, c)] * z[c]).sum::<f64>();
                }
            }
            Self::Mixture1d(m) => out[0] = m.sample(rng),
        }
    }
}

pub(crate) fn fill_standard_normals<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for pair in out.chunks_mut(2) {
        let (a, b) = standard_normal_pair(rng);
        pair[0] = a;
        if pair.len() > 1 {
            pair[1] = b;
        }
    }
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn spd_cholesky(m: &DMatrix<f64>, name: &'static str) -> Result<DMatrix<f64>> {
    if !is_symmetric(m, 0.0) {
        return Err(Error::NotSymmetric { name });
    }
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or(Error::NotPositiveDefinite { name })
}

type Jacobian = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// The filtering problem `dX = a(X) dt + G dB`, `dZ = h(X) dt + S dW`.
#[derive(Clone)]
pub struct DynamicsModel {
    dim_state: usize,
    dim_obs: usize,
    drift: Arc<dyn VectorField>,
    observation: Arc<dyn VectorField>,
    process_noise: DMatrix<f64>,
    obs_noise: DMatrix<f64>,
    obs_noise_inv: DMatrix<f64>,
    channels: Vec<ChannelKind>,
    initial: InitialDensitySpec,
    truth_initial: Option<DVector<f64>>,
    linear_drift: Option<DMatrix<f64>>,
    linear_obs: Option<DMatrix<f64>>,
    obs_jacobian: Option<Jacobian>,
}

impl fmt::Debug for DynamicsModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicsModel")
            .field("dim_state", &self.dim_state)
            .field("dim_obs", &self.dim_obs)
            .field("process_noise", &self.process_noise)
            .field("obs_noise", &self.obs_noise)
            .field("channels", &self.channels)
            .field("linear_drift", &self.linear_drift)
            .field("linear_obs", &self.linear_obs)
            .finish_non_exhaustive()
    }
}

impl DynamicsModel {
    /// Builds a model with identity noise scales. The drift and observation
    /// functions are probed on a handful of points and must return finite values.
    pub fn new(
        dim_state: usize,
        dim_obs: usize,
        drift: Arc<dyn VectorField>,
        observation: Arc<dyn VectorField>,
        initial: InitialDensitySpec,
    ) -> Result<Self> {
        if dim_state == 0 {
            return Err(invalid("dim_state", "must be at least 1"));
        }
        if dim_obs == 0 {
            return Err(invalid("dim_obs", "must be at least 1"));
        }
        if initial.dim() != dim_state {
            return Err(dimension(
                "initial_density",
                format!("expected dimension {dim_state}, got {}", initial.dim()),
            ));
        }
        let model = Self {
            dim_state,
            dim_obs,
            drift,
            observation,
            process_noise: DMatrix::identity(dim_state, dim_state),
            obs_noise: DMatrix::identity(dim_obs, dim_obs),
            obs_noise_inv: DMatrix::identity(dim_obs, dim_obs),
            channels: vec![ChannelKind::Linear; dim_obs],
            initial,
            truth_initial: None,
            linear_drift: None,
            linear_obs: None,
            obs_jacobian: None,
        };
        model.probe()?;
        Ok(model)
    }

    fn probe(&self) -> Result<()> {
        let d = self.dim_state;
        let mut points = vec![vec![0.0; d]];
        for i in 0..d {
            for s in [1.0, -1.0, 3.0] {
                let mut p = vec![0.0; d];
                p[i] = s;
                points.push(p);
            }
        }
        points.push((0..d).map(|i| 0.37 + 0.61 * i as f64).collect());
        let mut a = vec![0.0; d];
        let mut h = vec![0.0; self.dim_obs];
        for p in &points {
            self.drift.eval(p, &mut a);
            if !a.iter().all(|v| v.is_finite()) {
                return Err(invalid("drift", format!("non-finite value at probe point {p:?}")));
            }
            self.observation.eval(p, &mut h);
            if !h.iter().all(|v| v.is_finite()) {
                return Err(invalid("observation", format!("non-finite value at probe point {p:?}")));
            }
        }
        Ok(())
    }

    /// Process noise input matrix `G` (d x k). Any column count is allowed.
    pub fn with_process_noise(mut self, g: DMatrix<f64>) -> Result<Self> {
        if g.nrows() != self.dim_state || g.ncols() == 0 {
            return Err(dimension(
                "process_noise",
                format!("expected {} rows, got {}x{}", self.dim_state, g.nrows(), g.ncols()),
            ));
        }
        if !g.iter().all(|v| v.is_finite()) {
            return Err(invalid("process_noise", "entries must be finite"));
        }
        self.process_noise = g;
        Ok(self)
    }

    /// Observation noise scale `S` (m x m); must be invertible.
    pub fn with_obs_noise(mut self, s: DMatrix<f64>) -> Result<Self> {
        if s.nrows() != self.dim_obs || s.ncols() != self.dim_obs {
            return Err(dimension(
                "obs_noise",
                format!("expected {0}x{0}, got {1}x{2}", self.dim_obs, s.nrows(), s.ncols()),
            ));
        }
        let inv = s
            .clone()
            .try_inverse()
            .filter(|inv| inv.iter().all(|v| v.is_finite()))
            .ok_or_else(|| invalid("obs_noise", "observation noise scale must have full rank"))?;
        self.obs_noise = s;
        self.obs_noise_inv = inv;
        Ok(self)
    }

    pub fn with_channels(mut self, channels: Vec<ChannelKind>) -> Result<Self> {
        if channels.len() != self.dim_obs {
            return Err(dimension(
                "channels",
                format!("expected {} channel kinds, got {}", self.dim_obs, channels.len()),
            ));
        }
        self.channels = channels;
        Ok(self)
    }

    /// Fixes the true initial state instead of sampling it from the initial density.
    pub fn with_truth_initial(mut self, x0: DVector<f64>) -> Result<Self> {
        if x0.len() != self.dim_state {
            return Err(dimension(
                "truth_initial",
                format!("expected length {}", self.dim_state),
            ));
        }
        self.truth_initial = Some(x0);
        Ok(self)
    }

    pub fn with_linear_drift(mut self, a: DMatrix<f64>) -> Self {
        self.linear_drift = Some(a);
        self
    }

    pub fn with_obs_jacobian(mut self, jac: Jacobian) -> Self {
        self.obs_jacobian = Some(jac);
        self
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dim_obs(&self) -> usize {
        self.dim_obs
    }

    /// Width of the process noise input (columns of `G`).
    pub fn dim_process_noise(&self) -> usize {
        self.process_noise.ncols()
    }

    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.drift.eval(x, out)
    }

    pub fn observe(&self, x: &[f64], out: &mut [f64]) {
        self.observation.eval(x, out)
    }

    pub fn drift_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_state];
        self.drift(x, &mut out);
        out
    }

    pub fn observe_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_obs];
        self.observe(x, &mut out);
        out
    }

    pub fn process_noise(&self) -> &DMatrix<f64> {
        &self.process_noise
    }

    pub fn obs_noise(&self) -> &DMatrix<f64> {
        &self.obs_noise
    }

    pub fn obs_noise_inv(&self) -> &DMatrix<f64> {
        &self.obs_noise_inv
    }

    /// `S S^T`.
    pub fn obs_covariance(&self) -> DMatrix<f64> {
        &self.obs_noise * self.obs_noise.transpose()
    }

    /// `G G^T`.
    pub fn process_covariance(&self) -> DMatrix<f64> {
        &self.process_noise * self.process_noise.transpose()
    }

    pub fn channels(&self) -> &[ChannelKind] {
        &self.channels
    }

    pub fn initial(&self) -> &InitialDensitySpec {
        &self.initial
    }

    pub fn truth_initial(&self) -> Option<&DVector<f64>> {
        self.truth_initial.as_ref()
    }

    pub fn linear_drift(&self) -> Option<&DMatrix<f64>> {
        self.linear_drift.as_ref()
    }

    pub fn linear_obs(&self) -> Option<&DMatrix<f64>> {
        self.linear_obs.as_ref()
    }

    /// Jacobian of `h` at `x`: the exact matrix for linear observations, the
    /// registered closure otherwise.
    pub fn obs_jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        match (&self.linear_obs, &self.obs_jacobian) {
            (Some(h), _) => Some(h.clone()),
            (None, Some(j)) => Some(j(x)),
            _ => None,
        }
    }

    /// Channel-wise `h_a - h_b`, wrapped on angle channels.
    pub fn obs_difference(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let diff = a[j] - b[j];
            *o = match self.channels[j] {
                ChannelKind::Linear => diff,
                ChannelKind::Angle => wrap_angle(diff),
            };
        }
    }

    /// Ensemble mean of observation values (`n x m`, row-major); circular
    /// mean on angle channels.
    pub fn obs_mean(&self, values: &[f64]) -> Vec<f64> {
        let m = self.dim_obs;
        let n = values.len() / m;
        (0..m)
            .map(|j| match self.channels[j] {
                ChannelKind::Linear => crate::numerics::pairwise_sum_by(n, |i| values[i * m + j]) / n as f64,
                ChannelKind::Angle => {
                    let s = crate::numerics::pairwise_sum_by(n, |i| values[i * m + j].sin());
                    let c = crate::numerics::pairwise_sum_by(n, |i| values[i * m + j].cos());
                    s.atan2(c)
                }
            })
            .collect()
    }

    /// Applies `S^{-1}` to a raw observation-space vector.
    pub fn whiten(&self, raw: &[f64], out: &mut [f64]) {
        let s = &self.obs_noise_inv;
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..self.dim_obs).map(|c| s[(r, c)] * raw[c]).sum();
        }
    }
}

/// Linear-Gaussian problem `dX = A X dt + dB`, `dZ = H X dt + dW`, `X_0 ~ N(mu0, Sigma0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianModel {
    pub a: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub initial_mean: DVector<f64>,
    pub initial_cov: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn new(
        a: DMatrix<f64>,
        h: DMatrix<f64>,
        initial_mean: DVector<f64>,
        initial_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || a.ncols() != d {
            return Err(dimension(
                "A",
                format!("must be square and non-empty, got {}x{}", a.nrows(), a.ncols()),
            ));
        }
        if h.nrows() == 0 || h.ncols() != d {
            return Err(dimension(
                "H",
                format!("expected m x {d}, got {}x{}", h.nrows(), h.ncols()),
            ));
        }
        if initial_mean.len() != d {
            return Err(dimension(
                "initial_mean",
                format!("expected length {d}, got {}", initial_mean.len()),
            ));
        }
        if initial_cov.nrows() != d || initial_cov.ncols() != d {
            return Err(dimension(
                "initial_cov",
                format!("expected {d}x{d}, got {}x{}", initial_cov.nrows(), initial_cov.ncols()),
            ));
        }
        spd_cholesky(&initial_cov, "initial_cov")?;
        Ok(Self {
            a,
            h,
            initial_mean,
            initial_cov,
        })
    }

    pub fn to_dynamics(&self) -> Result<DynamicsModel> {
        let initial = InitialDensitySpec::gaussian(self.initial_mean.clone(), self.initial_cov.clone())?;
        let mut model = DynamicsModel::new(
            self.a.nrows(),
            self.h.nrows(),
            Arc::new(LinearMap(self.a.clone())),
            Arc::new(LinearMap(self.h.clone())),
            initial,
        )?;
        model.linear_drift = Some(self.a.clone());
        model.linear_obs = Some(self.h.clone());
        Ok(model)
    }
}

/// Builds the dynamics of the linear-Gaussian problem, retaining `A` and `H`
/// for the Kalman path.
pub fn build_linear_model(
    a: DMatrix<f64>,
    h: DMatrix<f64>,
    initial_mean: DVector<f64>,
    initial_cov: DMatrix<f64>,
) -> Result<DynamicsModel> {
    LinearGaussianModel::new(a, h, initial_mean, initial_cov)?.to_dynamics()
}

/// Bearing of the target seen from each sensor: `atan2(dy, dx)` in `(-pi, pi]`.
/// State layout is `(x1, v1, x2, v2)`.
pub fn bearing_observation(state: &[f64], sensors: &[[f64; 2]]) -> Result<Vec<f64>> {
    if state.len() != 4 {
        return Err(dimension("state", format!("expected length 4, got {}", state.len())));
    }
    sensors
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let dx = state[0] - s[0];
            let dy = state[2] - s[1];
            if dx == 0.0 && dy == 0.0 {
                return Err(Error::SingularGeometry { sensor: j });
            }
            Ok(bearing(dx, dy))
        })
        .collect()
}

fn bearing(dx: f64, dy: f64) -> f64 {
    let b = dy.atan2(dx);
    if b == -PI {
        PI
    } else {
        b
    }
}

/// Two-sensor bearing-only tracking of a target under the white-noise
/// acceleration model.
#[derive(Clone, Debug, PartialEq)]
pub struct BearingOnlyScenario {
    pub sigma_b: f64,
    pub sigma_w: f64,
    pub sensors: [[f64; 2]; 2],
    /// True initial target state `(x1, v1, x2, v2)`.
    pub initial_state: [f64; 4],
    pub particle_mean: [f64; 4],
    pub particle_cov: DMatrix<f64>,
    pub particles: usize,
}

impl BearingOnlyScenario {
    /// Reference scenario: sensors at (-1, -2) and (1, -2), target starting at
    /// (2, 20) with velocity (0.2, -5), 200 particles.
    pub fn default_scenario() -> Self {
        let initial_state = [2.0, 0.2, 20.0, -5.0];
        Self {
            sigma_b: 0.1,
            sigma_w: 0.017,
            sensors: [[-1.0, -2.0], [1.0, -2.0]],
            initial_state,
            particle_mean: initial_state,
            particle_cov: DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 0.01, 0.25, 0.01])),
            particles: 200,
        }
    }

    /// Constant-velocity drift matrix.
    pub fn drift_matrix() -> DMatrix<f64> {
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 1)] = 1.0;
        a[(2, 3)] = 1.0;
        a
    }

    /// Noise input `sigma_b * [[0,0],[1,0],[0,0],[0,1]]`.
    pub fn noise_input(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(4, 2);
        g[(1, 0)] = self.sigma_b;
        g[(3, 1)] = self.sigma_b;
        g
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_b >= 0.0 && self.sigma_b.is_finite()) {
            return Err(invalid("sigma_b", "must be non-negative"));
        }
        if !(self.sigma_w > 0.0 && self.sigma_w.is_finite()) {
            return Err(invalid("sigma_w", "must be positive"));
        }
        if self.particles < 2 {
            return Err(invalid("particles", "need at least 2"));
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<DynamicsModel> {
        self.validate()?;
        let a = Self::drift_matrix();
        let sensors = self.sensors;
        let observation = move |x: &[f64], out: &mut [f64]| {
            for (j, s) in sensors.iter().enumerate() {
                out[j] = bearing(x[0] - s[0], x[2] - s[1]);
            }
        };
        let jacobian = move |x: &[f64]| {
            let mut jac = DMatrix::zeros(2, 4);
            for (j, s) in sensors.iter().enumerate() {
                let dx = x[0] - s[0];
                let dy = x[2] - s[1];
                let r2 = dx * dx + dy * dy;
                jac[(j, 0)] = -dy / r2;
                jac[(j, 2)] = dx / r2;
            }
            jac
        };
        let initial =
            InitialDensitySpec::gaussian(DVector::from_row_slice(&self.particle_mean), self.particle_cov.clone())?;
        DynamicsModel::new(4, 2, Arc::new(LinearMap(a.clone())), Arc::new(observation), initial)?
            .with_process_noise(self.noise_input())?
            .with_obs_noise(DMatrix::identity(2, 2) * self.sigma_w)?
            .with_channels(vec![ChannelKind::Angle; 2])?
            .with_truth_initial(DVector::from_row_slice(&self.initial_state))
            .map(|m| m.with_linear_drift(a).with_obs_jacobian(Arc::new(jacobian)))
    }
}

/// Scalar model with polynomial drift and observation.
pub fn scalar_polynomial_model(
    drift: Polynomial,
    observation: Polynomial,
    initial: InitialDensitySpec,
    process_scale: f64,
    obs_scale: f64,
) -> Result<DynamicsModel> {
    let observation_c = observation.clone();
    let drift_c = drift.clone();
    let model = DynamicsModel::new(
        1,
        1,
        Arc::new(move |x: &[f64], out: &mut [f64]| out[0] = drift_c.eval(x[0])),
        Arc::new(move |x: &[f64], out: &mut [f64]| out[0] = observation_c.eval(x[0])),
        initial,
    )?
    .with_process_noise(DMatrix::from_element(1, 1, process_scale))?
    .with_obs_noise(DMatrix::from_element(1, 1, obs_scale))?;
    let mut model = model;
    if drift.coeffs.iter().skip(2).all(|c| *c == 0.0) && drift.coeffs.first().copied().unwrap_or(0.0) == 0.0 {
        model.linear_drift = Some(DMatrix::from_element(1, 1, drift.coeffs.get(1).copied().unwrap_or(0.0)));
    }
    if observation.coeffs.iter().skip(2).all(|c| *c == 0.0) && observation.coeffs.first().copied().unwrap_or(0.0) == 0.0
    {
        model.linear_obs = Some(DMatrix::from_element(
            1,
            1,
            observation.coeffs.get(1).copied().unwrap_or(0.0),
        ));
    }
    let deriv = observation.derivative();
    Ok(model.with_obs_jacobian(Arc::new(move |x: &[f64]| DMatrix::from_element(1, 1, deriv.eval(x[0])))))
}
