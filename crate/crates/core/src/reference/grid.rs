//! One-dimensional grid densities, the explicit Fokker–Planck step and the
//! Kushner–Stratonovich grid filter.

use std::path::Path;

use crate::error::{dimension, invalid, Error, Result};
use crate::models::{ChannelKind, DynamicsModel, InitialDensitySpec};
use crate::numerics::{pairwise_sum, pairwise_sum_by, trapezoid};
use crate::sde::TruthPath;

/// Diffusion coefficient of the generator `L^dagger p = -(a p)' + p''/2`.
const DIFFUSION: f64 = 0.5;

/// Cell Peclet number above which face values switch from central to upwind.
const PECLET_UPWIND: f64 = 2.0;

/// A density sampled on uniform nodes `lower + i dx`, `i = 0..n`.
///
/// Nodes double as finite-volume cell centres, so `sum_i p_i dx` is the mass.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity1D {
    lower: f64,
    dx: f64,
    values: Vec<f64>,
}

impl GridDensity1D {
    /// Wraps raw values and renormalizes them to unit mass.
    pub fn from_values(lower: f64, dx: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() < 3 {
            return Err(invalid("grid", "need at least 3 nodes"));
        }
        if !(dx > 0.0) || !dx.is_finite() || !lower.is_finite() {
            return Err(invalid("grid", "spacing must be positive and bounds finite"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("density", "values must be finite and non-negative"));
        }
        let mut g = Self { lower, dx, values };
        g.normalize()?;
        Ok(g)
    }

    /// Samples `f` on `n` nodes spanning `[lower, upper]` and normalizes.
    pub fn from_fn(lower: f64, upper: f64, n: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if n < 3 || !(upper > lower) {
            return Err(invalid("grid", "need n >= 3 and upper > lower"));
        }
        let dx = (upper - lower) / (n - 1) as f64;
        let values = (0..n).map(|i| f(lower + i as f64 * dx).max(0.0)).collect();
        Self::from_values(lower, dx, values)
    }

    /// Grid with spacing as close to `dx` as the interval allows.
    pub fn from_fn_spacing(lower: f64, upper: f64, dx: f64, f: impl Fn(f64) -> f64) -> Result<Self> {
        let n = ((upper - lower) / dx).round() as usize + 1;
        Self::from_fn(lower, upper, n, f)
    }

    /// Initial density on the grid (Gaussian or mixture, scalar only).
    pub fn from_initial(spec: &InitialDensitySpec, lower: f64, upper: f64, n: usize) -> Result<Self> {
        match spec {
            InitialDensitySpec::Mixture1d(m) => Self::from_fn(lower, upper, n, |x| m.pdf(x)),
            InitialDensitySpec::Gaussian { .. } if spec.dim() == 1 => {
                let mean = spec.mean()[0];
                let var = spec.cov()[(0, 0)];
                Self::from_fn(lower, upper, n, |x| gaussian_pdf(x, mean, var))
            }
            _ => Err(Error::Unsupported("grid densities are one-dimensional".into())),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.x(self.len() - 1)
    }

    pub fn x(&self, i: usize) -> f64 {
        self.lower + i as f64 * self.dx
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.x(i)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `sum_i p_i dx`.
    pub fn mass(&self) -> f64 {
        pairwise_sum(&self.values) * self.dx
    }

    /// Clips negatives to zero and rescales to unit mass.
    pub fn normalize(&mut self) -> Result<()> {
        self.values.iter_mut().for_each(|v| *v = v.max(0.0));
        let mass = self.mass();
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(Error::ZeroMass);
        }
        self.values.iter_mut().for_each(|v| *v /= mass);
        Ok(())
    }

    /// Trapezoidal `E[f]`, divided by the trapezoidal mass.
    pub fn expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        let fp: Vec<f64> = (0..self.len()).map(|i| f(self.x(i)) * self.values[i]).collect();
        trapezoid(&fp, self.dx) / trapezoid(&self.values, self.dx)
    }

    pub fn mean(&self) -> f64 {
        self.expectation(|x| x)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.expectation(|x| (x - m) * (x - m))
    }

    /// Linear interpolation; zero outside the grid.
    pub fn interpolate(&self, x: f64) -> f64 {
        let s = (x - self.lower) / self.dx;
        if !(s >= 0.0) || s > (self.len() - 1) as f64 {
            return 0.0;
        }
        let i = (s.floor() as usize).min(self.len() - 2);
        let w = s - i as f64;
        (1.0 - w) * self.values[i] + w * self.values[i + 1]
    }

    /// `int |p - q| dx` on this grid, with `q` interpolated.
    pub fn l1_distance(&self, other: &GridDensity1D) -> f64 {
        pairwise_sum_by(self.len(), |i| (self.values[i] - other.interpolate(self.x(i))).abs()) * self.dx
    }

    /// CSV with columns `x, p`.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "p"])?;
        for i in 0..self.len() {
            w.write_record([self.x(i).to_string(), self.values[i].to_string()])?;
        }
        w.flush()
    }
}

pub(crate) fn gaussian_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Trapezoidal mean, variance and `E[h]` of a density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridMoments {
    pub mean: f64,
    pub variance: f64,
    pub h_mean: f64,
}

pub fn grid_moments(density: &GridDensity1D, h: impl Fn(f64) -> f64) -> GridMoments {
    GridMoments {
        mean: density.mean(),
        variance: density.variance(),
        h_mean: density.expectation(h),
    }
}

/// Largest stable step for the explicit scheme: the diffusion limit
/// `dx^2 / 2` and the advective limit `dx / max|a|`.
pub fn max_stable_dt(dx: f64, max_abs_drift: f64) -> f64 {
    let diffusive = dx * dx / 2.0;
    if max_abs_drift > 0.0 {
        diffusive.min(dx / max_abs_drift)
    } else {
        diffusive
    }
}

fn face_drifts(density: &GridDensity1D, drift: &dyn Fn(f64) -> f64) -> Vec<f64> {
    (0..density.len() - 1)
        .map(|i| drift(density.x(i) + 0.5 * density.dx))
        .collect()
}

fn check_cfl(density: &GridDensity1D, faces: &[f64], dt: f64) -> Result<()> {
    let amax = faces.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let max_dt = max_stable_dt(density.dx, amax);
    if !(dt > 0.0) || dt > max_dt {
        return Err(Error::Cfl { dt, max_dt });
    }
    Ok(())
}

fn fp_update(density: &mut GridDensity1D, faces: &[f64], dt: f64) {
    let n = density.len();
    let dx = density.dx;
    let p = &density.values;
    // flux[i] sits between nodes i and i+1; the outer faces carry zero flux.
    let flux: Vec<f64> = (0..n - 1)
        .map(|i| {
            let a = faces[i];
            let face_p = if a.abs() * dx / DIFFUSION <= PECLET_UPWIND {
                0.5 * (p[i] + p[i + 1])
            } else if a > 0.0 {
                p[i]
            } else {
                p[i + 1]
            };
            a * face_p - DIFFUSION * (p[i + 1] - p[i]) / dx
        })
        .collect();
    let next: Vec<f64> = (0..n)
        .map(|i| {
            let right = if i + 1 < n { flux[i] } else { 0.0 };
            let left = if i > 0 { flux[i - 1] } else { 0.0 };
            p[i] - dt / dx * (right - left)
        })
        .collect();
    density.values = next;
}

/// One explicit finite-volume step of the Fokker–Planck operator with
/// zero-flux boundaries, followed by clipping and renormalization.
pub fn fokker_planck_step(density: &GridDensity1D, drift: &dyn Fn(f64) -> f64, dt: f64) -> Result<GridDensity1D> {
    let faces = face_drifts(density, drift);
    check_cfl(density, &faces, dt)?;
    let mut next = density.clone();
    fp_update(&mut next, &faces, dt);
    next.normalize()?;
    Ok(next)
}

fn scalar_model_parts(model: &DynamicsModel) -> Result<()> {
    if model.dim_state() != 1 {
        return Err(Error::Unsupported(format!(
            "the grid filter needs a scalar state, got dimension {}",
            model.dim_state()
        )));
    }
    if model.channels().contains(&ChannelKind::Angle) {
        return Err(Error::Unsupported(
            "the grid filter handles linear channels only".into(),
        ));
    }
    if (model.process_noise()[(0, 0)].powi(2) - 1.0).abs() > 1e-12 || model.dim_process_noise() != 1 {
        return Err(Error::Unsupported("the grid filter assumes unit process noise".into()));
    }
    Ok(())
}

/// Multiplicative observation update `p <- p (1 + (h - hhat)^T R^{-1} (dZ - hhat dt))`
/// with `R = S S^T`, then clipping and renormalization.
fn ks_correction(density: &mut GridDensity1D, model: &DynamicsModel, dz: &[f64], dt: f64) -> Result<()> {
    let m = model.dim_obs();
    let n = density.len();
    let mut hs = vec![0.0; n * m];
    for i in 0..n {
        model.observe(&[density.x(i)], &mut hs[i * m..(i + 1) * m]);
    }
    let p = &density.values;
    let mass = trapezoid(p, density.dx);
    let h_hat: Vec<f64> = (0..m)
        .map(|j| {
            let hp: Vec<f64> = (0..n).map(|i| hs[i * m + j] * p[i]).collect();
            trapezoid(&hp, density.dx) / mass
        })
        .collect();
    let sinv = model.obs_noise_inv();
    let rinv = sinv.transpose() * sinv;
    let innov: Vec<f64> = (0..m).map(|j| dz[j] - h_hat[j] * dt).collect();
    let weighted: Vec<f64> = (0..m).map(|r| (0..m).map(|c| rinv[(r, c)] * innov[c]).sum()).collect();
    for i in 0..n {
        let factor = 1.0 + (0..m).map(|j| (hs[i * m + j] - h_hat[j]) * weighted[j]).sum::<f64>();
        density.values[i] *= factor;
    }
    density.normalize()
}

/// One operator-split Kushner–Stratonovich step: Fokker–Planck prediction
/// over `dt`, then the multiplicative observation correction.
pub fn ks_grid_step_1d(density: &GridDensity1D, model: &DynamicsModel, dz: &[f64], dt: f64) -> Result<GridDensity1D> {
    ks_grid_step_substeps(density, model, dz, dt, 1)
}

/// As [`ks_grid_step_1d`] with the prediction split into `substeps` equal
/// explicit steps, so `dt / substeps` must satisfy the stability limit.
pub fn ks_grid_step_substeps(
    density: &GridDensity1D,
    model: &DynamicsModel,
    dz: &[f64],
    dt: f64,
    substeps: usize,
) -> Result<GridDensity1D> {
    scalar_model_parts(model)?;
    if dz.len() != model.dim_obs() {
        return Err(dimension(
            "dZ",
            format!("expected {} channels, got {}", model.dim_obs(), dz.len()),
        ));
    }
    let substeps = substeps.max(1);
    let drift = |x: f64| {
        let mut a = [0.0];
        model.drift(&[x], &mut a);
        a[0]
    };
    let faces = face_drifts(density, &drift);
    let h = dt / substeps as f64;
    check_cfl(density, &faces, h)?;
    let mut next = density.clone();
    for _ in 0..substeps {
        fp_update(&mut next, &faces, h);
    }
    next.normalize()?;
    ks_correction(&mut next, model, dz, dt)?;
    Ok(next)
}

/// Grid settings for the Kushner–Stratonovich reference.
#[derive(Clone, Debug, PartialEq)]
pub struct KsGridOptions {
    pub lower: f64,
    pub upper: f64,
    pub dx: f64,
    pub substeps: usize,
}

impl KsGridOptions {
    /// Domain of `mean +- radius * std` around the initial density.
    pub fn around_initial(spec: &InitialDensitySpec, radius: f64, dx: f64, substeps: usize) -> Self {
        let mean = spec.mean()[0];
        let std = spec.cov()[(0, 0)].sqrt();
        Self {
            lower: mean - radius * std,
            upper: mean + radius * std,
            dx,
            substeps,
        }
    }
}

/// Per-step moments of the grid posterior plus the terminal density and
/// any requested snapshots.
#[derive(Clone, Debug)]
pub struct GridTrace {
    pub times: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub h_means: Vec<Vec<f64>>,
    pub terminal: GridDensity1D,
    pub snapshots: Vec<(f64, GridDensity1D)>,
}

/// Runs the grid filter along `truth`, snapshotting after the steps whose
/// end time is nearest to each requested time.
pub fn run_ks_grid(
    model: &DynamicsModel,
    truth: &TruthPath,
    options: &KsGridOptions,
    snapshot_times: &[f64],
) -> Result<GridTrace> {
    scalar_model_parts(model)?;
    let mut density =
        GridDensity1D::from_fn_spacing(options.lower, options.upper, options.dx, |x| match model.initial() {
            InitialDensitySpec::Mixture1d(m) => m.pdf(x),
            spec => gaussian_pdf(x, spec.mean()[0], spec.cov()[(0, 0)]),
        })?;
    let snap_steps = snapshot_steps(truth, snapshot_times);
    let m = model.dim_obs();
    let steps = truth.steps();
    let mut trace = GridTrace {
        times: Vec::with_capacity(steps),
        means: Vec::with_capacity(steps),
        variances: Vec::with_capacity(steps),
        h_means: Vec::with_capacity(steps),
        terminal: density.clone(),
        snapshots: Vec::new(),
    };
    for k in 0..steps {
        density = ks_grid_step_substeps(&density, model, &truth.dz[k], truth.grid.dt, options.substeps)?;
        trace.times.push(truth.times[k]);
        trace.means.push(density.mean());
        trace.variances.push(density.variance());
        trace.h_means.push(
            (0..m)
                .map(|j| {
                    density.expectation(|x| {
                        let mut h = vec![0.0; m];
                        model.observe(&[x], &mut h);
                        h[j]
                    })
                })
                .collect(),
        );
        if snap_steps.contains(&k) {
            trace.snapshots.push((truth.times[k], density.clone()));
        }
    }
    trace.terminal = density;
    Ok(trace)
}

/// Step indices whose end times are nearest to the requested times.
pub(crate) fn snapshot_steps(truth: &TruthPath, times: &[f64]) -> Vec<usize> {
    times
        .iter()
        .filter_map(|&t| {
            (0..truth.steps()).min_by(|&a, &b| (truth.times[a] - t).abs().total_cmp(&(truth.times[b] - t).abs()))
        })
        .collect()
}
