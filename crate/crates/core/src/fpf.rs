//! The feedback particle filter: innovations, the Wong–Zakai correction,
//! the per-step particle update and ensemble statistics.
//!
//! Observations are whitened internally: with noise scale `S`, the filter
//! runs on `S^{-1} h` and `S^{-1} dZ`, so gains returned here act on the
//! whitened innovation.

use std::path::Path;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{dimension, invalid, Error, Result};
use crate::gain::{
    assemble_particle_residuals, clip_gain, constant_gain_from_residuals, dns_gain_1d, solve_galerkin, GainField,
    GalerkinBasis1D,
};
use crate::kde::{kde_ensemble, DEFAULT_KDE_NODES};
use crate::models::{ChannelKind, DynamicsModel};
use crate::numerics::{pairwise_sum_by, wrap_angle};
use crate::sde::{hash_increments, stream_rng, NoiseStream, Purpose, StreamId, TruthPath};

/// Particle states (`N x d`, row-major) with one process-noise stream per particle.
#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    dim: usize,
    states: Vec<f64>,
    streams: Vec<NoiseStream>,
    pub t: f64,
}

impl ParticleEnsemble {
    /// Wraps explicit states; particle `i` gets stream `(seed, ParticleProcess, i)`.
    pub fn from_states(states: Vec<f64>, dim: usize, noise_dim: usize, seed: u64, t: f64) -> Result<Self> {
        if dim == 0 || states.is_empty() || !states.len().is_multiple_of(dim) {
            return Err(invalid(
                "states",
                "length must be a positive multiple of the state dimension",
            ));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(invalid("states", "particles must be finite"));
        }
        let n = states.len() / dim;
        let streams = (0..n)
            .map(|i| NoiseStream::new(seed, StreamId::new(Purpose::ParticleProcess, i as u64), noise_dim))
            .collect();
        Ok(Self {
            dim,
            states,
            streams,
            t,
        })
    }

    /// Draws `n` particles from the model's initial density.
    pub fn sample(model: &DynamicsModel, n: usize, seed: u64, t: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::TooFewParticles { needed: 1, got: 0 });
        }
        let d = model.dim_state();
        let mut states = vec![0.0; n * d];
        for (i, chunk) in states.chunks_mut(d).enumerate() {
            let mut rng = stream_rng(seed, StreamId::new(Purpose::ParticleInit, i as u64));
            model.initial().sample_into(&mut rng, chunk);
        }
        Self::from_states(states, d, model.dim_process_noise(), seed, t)
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    /// Reorders particles together with their noise streams.
    pub fn permute(&mut self, order: &[usize]) {
        let d = self.dim;
        self.states = order
            .iter()
            .flat_map(|&i| self.states[i * d..(i + 1) * d].to_vec())
            .collect();
        self.streams = order.iter().map(|&i| self.streams[i].clone()).collect();
    }
}

/// Sample mean, covariance (`1/(N-1)`) and observation mean of an ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Ensemble mean of `h`, circular on angle channels.
    pub h_hat: Vec<f64>,
}

fn sample_moments(states: &[f64], d: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = states.len() / d;
    let mean = DVector::from_fn(d, |l, _| pairwise_sum_by(n, |i| states[i * d + l]) / n as f64);
    let cov = DMatrix::from_fn(d, d, |a, b| {
        if b < a {
            return 0.0;
        }
        pairwise_sum_by(n, |i| (states[i * d + a] - mean[a]) * (states[i * d + b] - mean[b])) / (n - 1) as f64
    });
    let cov = DMatrix::from_fn(d, d, |a, b| if b >= a { cov[(a, b)] } else { cov[(b, a)] });
    (mean, cov)
}

fn observe_all(model: &DynamicsModel, states: &[f64]) -> Vec<f64> {
    let d = model.dim_state();
    let m = model.dim_obs();
    let n = states.len() / d;
    let mut hs = vec![0.0; n * m];
    hs.par_chunks_mut(m)
        .zip(states.par_chunks(d))
        .for_each(|(h, x)| model.observe(x, h));
    hs
}

/// Ensemble statistics with `h` taken from the model.
pub fn ensemble_stats(ensemble: &ParticleEnsemble, model: &DynamicsModel) -> Result<EnsembleStats> {
    if ensemble.len() < 2 {
        return Err(Error::TooFewParticles {
            needed: 2,
            got: ensemble.len(),
        });
    }
    let hs = observe_all(model, &ensemble.states);
    Ok(stats_from(model, &ensemble.states, ensemble.dim, &hs))
}

fn stats_from(model: &DynamicsModel, states: &[f64], d: usize, hs: &[f64]) -> EnsembleStats {
    let (mean, cov) = sample_moments(states, d);
    EnsembleStats {
        mean,
        cov,
        h_hat: model.obs_mean(hs),
    }
}

/// `dI = dZ - (h_i + hhat) dt / 2`.
pub fn innovation_increment(dz: &[f64], h_i: &[f64], h_hat: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(invalid("dt", "must be positive"));
    }
    if h_i.len() != dz.len() || h_hat.len() != dz.len() {
        return Err(dimension("innovation", "dZ, h_i and hhat must have equal length"));
    }
    Ok((0..dz.len()).map(|j| dz[j] - 0.5 * (h_i[j] + h_hat[j]) * dt).collect())
}

/// Innovation with angle channels handled on the circle:
/// `dI = wrap(dZ/dt - hhat) dt - wrap(h_i - hhat) dt / 2` on angle channels.
pub fn innovation_increment_wrapped(
    channels: &[ChannelKind],
    dz: &[f64],
    h_i: &[f64],
    h_hat: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let plain = innovation_increment(dz, h_i, h_hat, dt)?;
    Ok(plain
        .into_iter()
        .enumerate()
        .map(|(j, v)| match channels.get(j) {
            Some(ChannelKind::Angle) => {
                wrap_angle(dz[j] / dt - h_hat[j]) * dt - 0.5 * wrap_angle(h_i[j] - h_hat[j]) * dt
            }
            _ => v,
        })
        .collect())
}

/// `Omega_l = 1/2 sum_{k,s} K_ks dK_ls/dx_k` written into `out`.
///
/// Zero for gains that are constant or piecewise constant; central
/// differences with step `1e-4 (1 + |x_k|)` otherwise. Returns true when the
/// stencil left the support of a tabulated gain.
pub fn wong_zakai_correction_into(gain: &GainField, x: &[f64], out: &mut [f64]) -> bool {
    out.iter_mut().for_each(|v| *v = 0.0);
    if gain.is_constant() || matches!(gain, GainField::Galerkin1d { .. }) {
        return false;
    }
    let d = gain.dim_state();
    let m = gain.dim_obs();
    let mut k0 = vec![0.0; d * m];
    gain.evaluate_into(x, &mut k0);
    let mut kp = vec![0.0; d * m];
    let mut km = vec![0.0; d * m];
    let mut xp = x.to_vec();
    let mut extrapolated = false;
    for k in 0..d {
        let eps = 1e-4 * (1.0 + x[k].abs());
        xp[k] = x[k] + eps;
        extrapolated |= !gain.in_support(&xp);
        gain.evaluate_into(&xp, &mut kp);
        xp[k] = x[k] - eps;
        extrapolated |= !gain.in_support(&xp);
        gain.evaluate_into(&xp, &mut km);
        xp[k] = x[k];
        for l in 0..d {
            for s in 0..m {
                let deriv = (kp[l * m + s] - km[l * m + s]) / (2.0 * eps);
                out[l] += 0.5 * k0[k * m + s] * deriv;
            }
        }
    }
    extrapolated
}

pub fn wong_zakai_correction(gain: &GainField, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; gain.dim_state()];
    if wong_zakai_correction_into(gain, x, &mut out) {
        warn!("Wong-Zakai stencil at {x:?} extends beyond the tabulated gain; using clamped values");
    }
    out
}

type GainBuilder = Arc<dyn Fn(&GainContext<'_>) -> Result<GainField> + Send + Sync>;

/// How the gain is rebuilt from the current ensemble at every step.
#[derive(Clone)]
pub enum GainStrategy {
    /// `Sigma^(N) H^T` with the (whitened) linear observation matrix.
    KalmanFromEnsemble,
    Constant,
    /// Particle-assembled Galerkin gain on `cells` uniform cells over `mean +- 4 std`.
    Galerkin {
        cells: usize,
    },
    /// Direct solution on a Silverman KDE of the ensemble over `mean +- 6 std`.
    DnsKde,
    /// `K = 0`: particles follow the prior dynamics.
    Zero,
    /// Caller-supplied gain constructor.
    Custom(GainBuilder),
}

impl std::fmt::Debug for GainStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::KalmanFromEnsemble => write!(f, "KalmanFromEnsemble"),
            Self::Constant => write!(f, "Constant"),
            Self::Galerkin { cells } => write!(f, "Galerkin {{ cells: {cells} }}"),
            Self::DnsKde => write!(f, "DnsKde"),
            Self::Zero => write!(f, "Zero"),
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl GainStrategy {
    /// A strategy that always returns the same field.
    pub fn fixed(field: GainField) -> Self {
        Self::Custom(Arc::new(move |_| Ok(field.clone())))
    }
}

/// What a gain constructor sees: the ensemble, its statistics and the
/// whitened residuals `S^{-1} (h(X^i) - hhat)` (`N x m`, wrapped on angle channels).
pub struct GainContext<'a> {
    pub model: &'a DynamicsModel,
    pub states: &'a [f64],
    pub stats: &'a EnsembleStats,
    pub residuals: &'a [f64],
}

/// A gain plus whether the Galerkin fallback fired while building it.
struct BuiltGain {
    field: GainField,
    degenerate: bool,
}

fn whitened_obs_matrix(model: &DynamicsModel, mean: &DVector<f64>) -> Result<DMatrix<f64>> {
    let h = model
        .obs_jacobian(mean.as_slice())
        .ok_or_else(|| Error::Unsupported("the Kalman gain needs a linear observation or a Jacobian".into()))?;
    Ok(model.obs_noise_inv() * h)
}

fn require_scalar(model: &DynamicsModel, what: &str) -> Result<()> {
    if model.dim_state() != 1 {
        return Err(Error::Unsupported(format!("the {what} gain needs a scalar state")));
    }
    Ok(())
}

fn build_gain(strategy: &GainStrategy, ctx: &GainContext<'_>) -> Result<BuiltGain> {
    let model = ctx.model;
    let d = model.dim_state();
    let m = model.dim_obs();
    let plain = |field| {
        Ok(BuiltGain {
            field,
            degenerate: false,
        })
    };
    match strategy {
        GainStrategy::Zero => plain(GainField::Constant(DMatrix::zeros(d, m))),
        GainStrategy::KalmanFromEnsemble => {
            let h = whitened_obs_matrix(model, &ctx.stats.mean)?;
            plain(GainField::Kalman(&ctx.stats.cov * h.transpose()))
        }
        GainStrategy::Constant => plain(constant_gain_from_residuals(ctx.states, d, ctx.residuals, m)?),
        GainStrategy::Galerkin { cells } => {
            require_scalar(model, "Galerkin")?;
            let mu = ctx.stats.mean[0];
            let sd = ctx.stats.cov[(0, 0)].sqrt();
            if !(sd > 0.0) {
                return Err(invalid(
                    "ensemble",
                    "collapsed ensemble has no spread for the Galerkin partition",
                ));
            }
            let basis = GalerkinBasis1D::uniform(mu - 4.0 * sd, mu + 4.0 * sd, *cells)?;
            let n = ctx.states.len();
            let mut kappa = Vec::with_capacity(m);
            let mut degenerate = false;
            for j in 0..m {
                let r: Vec<f64> = (0..n).map(|i| ctx.residuals[i * m + j]).collect();
                let (a, b) = assemble_particle_residuals(ctx.states, &r, &basis);
                let sol = solve_galerkin(&a, &b)?;
                degenerate |= sol.warning.is_some();
                kappa.push(sol.kappa.iter().copied().collect());
            }
            Ok(BuiltGain {
                field: GainField::Galerkin1d {
                    nodes: basis.nodes().to_vec(),
                    kappa,
                },
                degenerate,
            })
        }
        GainStrategy::DnsKde => {
            require_scalar(model, "direct-solution")?;
            if model.channels().contains(&ChannelKind::Angle) {
                return Err(Error::Unsupported(
                    "the direct-solution gain handles linear channels only".into(),
                ));
            }
            let density = kde_ensemble(ctx.states, 6.0, DEFAULT_KDE_NODES)?;
            let sinv = model.obs_noise_inv().clone();
            let mut values = Vec::with_capacity(m);
            for j in 0..m {
                let hj = |x: f64| {
                    let raw = model.observe_vec(&[x]);
                    (0..m).map(|c| sinv[(j, c)] * raw[c]).sum::<f64>()
                };
                values.push(dns_gain_1d(&density, &hj)?.k);
            }
            plain(GainField::Grid1d {
                lower: density.lower(),
                dx: density.dx(),
                values,
            })
        }
        GainStrategy::Custom(f) => plain(f(ctx)?),
    }
}

/// Options shared by every step of a run.
#[derive(Clone, Debug, Default)]
pub struct FpfOptions {
    /// Cap on the Frobenius norm of `K(x)` per particle.
    pub gain_clip: Option<f64>,
    /// Times at which full ensembles are kept.
    pub snapshot_times: Vec<f64>,
}

/// Per-worker buffers for the particle update.
struct Scratch {
    a: Vec<f64>,
    db: Vec<f64>,
    k: Vec<f64>,
    di: Vec<f64>,
    omega: Vec<f64>,
    next: Vec<f64>,
}

impl Scratch {
    fn new(d: usize, m: usize, noise_dim: usize) -> Self {
        Self {
            a: vec![0.0; d],
            db: vec![0.0; noise_dim],
            k: vec![0.0; d * m],
            di: vec![0.0; m],
            omega: vec![0.0; d],
            next: vec![0.0; d],
        }
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub gain: GainField,
    pub degenerate: bool,
    pub extrapolated: usize,
}

fn residuals(model: &DynamicsModel, hs: &[f64], h_hat: &[f64]) -> Vec<f64> {
    let m = model.dim_obs();
    let mut raw = vec![0.0; m];
    let mut out = vec![0.0; hs.len()];
    for (h, o) in hs.chunks(m).zip(out.chunks_mut(m)) {
        model.obs_difference(h, h_hat, &mut raw);
        model.whiten(&raw, o);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn step_inner(
    ensemble: &mut ParticleEnsemble,
    model: &DynamicsModel,
    strategy: &GainStrategy,
    stats: &EnsembleStats,
    hs: &[f64],
    dz: &[f64],
    dt: f64,
    options: &FpfOptions,
    step: usize,
) -> Result<StepReport> {
    let d = model.dim_state();
    let m = model.dim_obs();
    let r = residuals(model, hs, &stats.h_hat);
    let built = build_gain(
        strategy,
        &GainContext {
            model,
            states: &ensemble.states,
            stats,
            residuals: &r,
        },
    )?;
    let gain = &built.field;
    if gain.dim_state() != d || gain.dim_obs() != m {
        return Err(dimension("gain", format!("expected {d}x{m} gain")));
    }
    // Whitened innovation common part S^{-1} (dZ - hhat dt), wrapped on angle channels.
    let mut common_raw = vec![0.0; m];
    for j in 0..m {
        common_raw[j] = match model.channels()[j] {
            ChannelKind::Linear => dz[j] - stats.h_hat[j] * dt,
            ChannelKind::Angle => wrap_angle(dz[j] / dt - stats.h_hat[j]) * dt,
        };
    }
    let mut common = vec![0.0; m];
    model.whiten(&common_raw, &mut common);
    let needs_omega = !gain.is_constant() && !matches!(gain, GainField::Galerkin1d { .. });
    let g = model.process_noise();
    let t = ensemble.t;

    let noise_dim = model.dim_process_noise();
    let outcome = ensemble
        .states
        .par_chunks_mut(d)
        .zip(ensemble.streams.par_iter_mut())
        .zip(r.par_chunks(m))
        .enumerate()
        .map_init(
            || Scratch::new(d, m, noise_dim),
            |sc, (i, ((x, stream), ri))| {
                model.drift(x, &mut sc.a);
                stream.next_increment_into(dt, &mut sc.db);
                gain.evaluate_into(x, &mut sc.k);
                if let Some(cap) = options.gain_clip {
                    clip_gain(&mut sc.k, cap);
                }
                for j in 0..m {
                    sc.di[j] = common[j] - 0.5 * ri[j] * dt;
                }
                let extrapolated = needs_omega && wong_zakai_correction_into(gain, x, &mut sc.omega);
                let mut finite = true;
                for l in 0..d {
                    let noise: f64 = (0..noise_dim).map(|c| g[(l, c)] * sc.db[c]).sum();
                    let feedback: f64 = (0..m).map(|j| sc.k[l * m + j] * sc.di[j]).sum();
                    sc.next[l] = x[l] + sc.a[l] * dt + noise + feedback + sc.omega[l] * dt;
                    finite &= sc.next[l].is_finite();
                }
                if !finite {
                    return Err((i, x.to_vec()));
                }
                x.copy_from_slice(&sc.next);
                Ok(usize::from(extrapolated))
            },
        )
        .reduce(
            || Ok(0),
            |a, b| match (a, b) {
                (Ok(x), Ok(y)) => Ok(x + y),
                (Err(e1), Err(e2)) => Err(if e1.0 <= e2.0 { e1 } else { e2 }),
                (Err(e), _) | (_, Err(e)) => Err(e),
            },
        );
    let extrapolated = outcome.map_err(|(i, x)| Error::NonFinite {
        step,
        context: format!("particle {i} at t = {t} (state before update {x:?})"),
    })?;
    if extrapolated > 0 {
        warn!("step {step}: {extrapolated} particles evaluated the gain outside its table");
    }
    ensemble.t += dt;
    Ok(StepReport {
        gain: built.field,
        degenerate: built.degenerate,
        extrapolated,
    })
}

/// One synchronous update of every particle,
/// `dX = a dt + G dB + K(X) dI + Omega dt`, with `hhat` and the gain taken
/// from the pre-update ensemble. `step` labels errors.
pub fn fpf_step(
    ensemble: &mut ParticleEnsemble,
    model: &DynamicsModel,
    strategy: &GainStrategy,
    dz: &[f64],
    dt: f64,
    options: &FpfOptions,
    step: usize,
) -> Result<StepReport> {
    if !(dt > 0.0) {
        return Err(invalid("dt", "must be positive"));
    }
    if dz.len() != model.dim_obs() {
        return Err(dimension("dZ", format!("expected {} channels", model.dim_obs())));
    }
    let hs = observe_all(model, &ensemble.states);
    let stats = if ensemble.len() >= 2 {
        stats_from(model, &ensemble.states, ensemble.dim, &hs)
    } else {
        let d = ensemble.dim;
        EnsembleStats {
            mean: DVector::from_column_slice(&ensemble.states),
            cov: DMatrix::zeros(d, d),
            h_hat: hs.clone(),
        }
    };
    step_inner(ensemble, model, strategy, &stats, &hs, dz, dt, options, step)
}

/// Per-step statistics of a filter run plus optional ensemble snapshots.
#[derive(Clone, Debug)]
pub struct FilterTrace {
    pub times: Vec<f64>,
    pub stats: Vec<EnsembleStats>,
    pub snapshots: Vec<(f64, Vec<f64>)>,
    pub final_states: Vec<f64>,
    pub final_gain: Option<GainField>,
    pub degenerate_steps: usize,
    pub dz_hash: String,
    pub dim_state: usize,
}

impl FilterTrace {
    pub fn means(&self) -> Vec<Vec<f64>> {
        self.stats.iter().map(|s| s.mean.iter().copied().collect()).collect()
    }

    /// CSV `t, mu_1..mu_d, sigma_ij (upper triangle), hhat_1..hhat_m`,
    /// preceded by a `# dz_sha256=...` comment line.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "# dz_sha256={}", self.dz_hash)?;
        let d = self.dim_state;
        let m = self.stats.first().map_or(0, |s| s.h_hat.len());
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("mu_{i}")));
        for a in 1..=d {
            header.extend((a..=d).map(|b| format!("sigma_{a}{b}")));
        }
        header.extend((1..=m).map(|j| format!("hhat_{j}")));
        w.write_record(&header)?;
        for (t, s) in self.times.iter().zip(&self.stats) {
            let mut row = vec![t.to_string()];
            row.extend(s.mean.iter().map(f64::to_string));
            for a in 0..d {
                row.extend((a..d).map(|b| s.cov[(a, b)].to_string()));
            }
            row.extend(s.h_hat.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()
    }

    /// CSV `t, particle_id, x_1..x_d` with every snapshot ensemble.
    pub fn write_snapshots_csv(&self, path: &Path) -> std::io::Result<()> {
        let d = self.dim_state;
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string(), "particle_id".to_string()];
        header.extend((1..=d).map(|i| format!("x_{i}")));
        w.write_record(&header)?;
        for (t, states) in &self.snapshots {
            for (i, x) in states.chunks(d).enumerate() {
                let mut row = vec![t.to_string(), i.to_string()];
                row.extend(x.iter().map(f64::to_string));
                w.write_record(&row)?;
            }
        }
        w.flush()
    }
}

/// Runs the filter along `truth` with `n` particles drawn from the model's
/// initial density. The gain is rebuilt from the ensemble at every step.
pub fn run_fpf(
    model: &DynamicsModel,
    strategy: &GainStrategy,
    truth: &TruthPath,
    n: usize,
    seed: u64,
    options: &FpfOptions,
) -> Result<FilterTrace> {
    if truth.initial_state.len() != model.dim_state() || truth.dz.first().map_or(0, Vec::len) != model.dim_obs() {
        return Err(dimension("truth", "truth path and model dimensions disagree"));
    }
    if n < 2 {
        return Err(Error::TooFewParticles { needed: 2, got: n });
    }
    let mut ensemble = ParticleEnsemble::sample(model, n, seed, truth.grid.t0)?;
    run_fpf_from(model, strategy, truth, &mut ensemble, options)
}

/// As [`run_fpf`], starting from a given ensemble.
pub fn run_fpf_from(
    model: &DynamicsModel,
    strategy: &GainStrategy,
    truth: &TruthPath,
    ensemble: &mut ParticleEnsemble,
    options: &FpfOptions,
) -> Result<FilterTrace> {
    let d = model.dim_state();
    let steps = truth.steps();
    let snap_steps = crate::reference::grid::snapshot_steps(truth, &options.snapshot_times);
    let mut trace = FilterTrace {
        times: Vec::with_capacity(steps),
        stats: Vec::with_capacity(steps),
        snapshots: Vec::new(),
        final_states: Vec::new(),
        final_gain: None,
        degenerate_steps: 0,
        dz_hash: hash_increments(&truth.dz),
        dim_state: d,
    };
    let mut hs = observe_all(model, &ensemble.states);
    let mut stats = stats_from(model, &ensemble.states, d, &hs);
    for k in 0..steps {
        let report = step_inner(
            ensemble,
            model,
            strategy,
            &stats,
            &hs,
            &truth.dz[k],
            truth.grid.dt,
            options,
            k,
        )?;
        trace.degenerate_steps += usize::from(report.degenerate);
        hs = observe_all(model, &ensemble.states);
        stats = stats_from(model, &ensemble.states, d, &hs);
        trace.times.push(truth.times[k]);
        trace.stats.push(stats.clone());
        if snap_steps.contains(&k) {
            trace.snapshots.push((truth.times[k], ensemble.states.clone()));
        }
        if k + 1 == steps {
            trace.final_gain = Some(report.gain);
        }
    }
    if trace.degenerate_steps > 0 {
        warn!(
            "{} of {steps} steps used the regularized Galerkin solve (empty cells)",
            trace.degenerate_steps
        );
    }
    trace.final_states = ensemble.states.clone();
    Ok(trace)
}
