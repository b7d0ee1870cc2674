//! Fixed-step Euler–Maruyama integration with counter-addressable noise streams.
//!
//! Every random quantity is keyed by `(master seed, purpose, index, counter)`.
//! A stream draws Gaussian vectors with a fixed number of generator words per
//! draw, so the `c`-th increment can be regenerated directly with
//! [`NoiseStream::increment_at`] and sequential use never depends on how other
//! streams are interleaved.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{dimension, invalid, Error, Result};
use crate::models::DynamicsModel;

/// Threshold on `|X|` beyond which a path counts as blown up.
pub const BLOW_UP_NORM: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(invalid("dt", "time step must be positive and finite"));
        }
        if steps == 0 {
            return Err(invalid("steps", "must be at least 1"));
        }
        if !t0.is_finite() || !(t0 + steps as f64 * dt).is_finite() {
            return Err(invalid("t0", "horizon must be finite"));
        }
        Ok(Self { t0, dt, steps })
    }

    /// Time at the end of step `k` (0-based), i.e. `t0 + (k + 1) dt`.
    pub fn time_after(&self, k: usize) -> f64 {
        self.t0 + (k + 1) as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.t0 + self.steps as f64 * self.dt
    }
}

/// What a stream drives; part of the stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    TruthInit = 1,
    TruthProcess = 2,
    TruthObservation = 3,
    ParticleInit = 4,
    ParticleProcess = 5,
    Smoluchowski = 6,
    Sampling = 7,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub purpose: Purpose,
    pub index: u64,
}

impl StreamId {
    pub fn new(purpose: Purpose, index: u64) -> Self {
        Self { purpose, index }
    }

    fn word(self) -> u64 {
        debug_assert!(self.index < 1 << 56);
        ((self.purpose as u64) << 56) | (self.index & ((1 << 56) - 1))
    }
}

/// A fresh ChaCha generator for `(seed, stream)`, positioned at word 0.
pub fn stream_rng(seed: u64, id: StreamId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id.word());
    rng
}

/// Two independent standard normals from exactly two generator outputs
/// (Box–Muller), keeping stream consumption fixed.
///
/// Kept out of line: inlined copies may be lowered to different `sin`/`cos`
/// routines and then differ in the last bit, which breaks exact replay.
#[inline(never)]
pub fn standard_normal_pair<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let u1 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// Gaussian increment stream for one driving Wiener process.
#[derive(Clone, Debug)]
pub struct NoiseStream {
    seed: u64,
    id: StreamId,
    dim: usize,
    counter: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, id: StreamId, dim: usize) -> Self {
        assert!(dim > 0, "noise stream dimension must be positive");
        Self {
            seed,
            id,
            dim,
            counter: 0,
            rng: stream_rng(seed, id),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Index of the next draw.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    fn words_per_draw(&self) -> u128 {
        // Two u64 (four 32-bit words) per pair of normals.
        4 * self.dim.div_ceil(2) as u128
    }

    /// Fills `out` with standard normals and advances the counter.
    pub fn next_standard_normals(&mut self, out: &mut [f64]) {
        assert_eq!(out.len(), self.dim);
        crate::models::fill_standard_normals(&mut self.rng, out);
        self.counter += 1;
    }

    /// Fills `out` with `N(0, dt I)` and advances the counter.
    pub fn next_increment_into(&mut self, dt: f64, out: &mut [f64]) {
        self.next_standard_normals(out);
        let s = dt.sqrt();
        out.iter_mut().for_each(|v| *v *= s);
    }

    /// Regenerates the increment with the given counter without touching this stream.
    pub fn increment_at(&self, counter: u64, dt: f64) -> Vec<f64> {
        let mut rng = stream_rng(self.seed, self.id);
        rng.set_word_pos(counter as u128 * self.words_per_draw());
        let mut out = vec![0.0; self.dim];
        crate::models::fill_standard_normals(&mut rng, &mut out);
        let s = dt.sqrt();
        out.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Raw 64-bit output, for tests of stream independence.
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

/// Draws the next Wiener increment `N(0, dt I_dim)` from `stream`.
pub fn wiener_increment(stream: &mut NoiseStream, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(invalid("dt", "increment time step must be positive"));
    }
    let mut out = vec![0.0; stream.dim()];
    stream.next_increment_into(dt, &mut out);
    Ok(out)
}

/// `x + drift dt + diffusion dW` written into `out`; returns false if any
/// component is non-finite.
pub(crate) fn em_update(
    x: &[f64],
    drift: &[f64],
    diffusion: &DMatrix<f64>,
    dw: &[f64],
    dt: f64,
    out: &mut [f64],
) -> bool {
    let mut finite = true;
    for (r, o) in out.iter_mut().enumerate() {
        let noise: f64 = (0..diffusion.ncols()).map(|c| diffusion[(r, c)] * dw[c]).sum();
        *o = x[r] + drift[r] * dt + noise;
        finite &= o.is_finite();
    }
    finite
}

/// One Euler–Maruyama step `x + drift dt + diffusion dW`. `step` only labels errors.
pub fn euler_maruyama_step(
    step: usize,
    x: &[f64],
    drift_value: &[f64],
    diffusion: &DMatrix<f64>,
    dw: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    let d = x.len();
    if drift_value.len() != d || diffusion.nrows() != d || diffusion.ncols() != dw.len() {
        return Err(dimension(
            "euler_maruyama_step",
            format!(
                "x: {d}, drift: {}, diffusion: {}x{}, dW: {}",
                drift_value.len(),
                diffusion.nrows(),
                diffusion.ncols(),
                dw.len()
            ),
        ));
    }
    let mut out = vec![0.0; d];
    if !em_update(x, drift_value, diffusion, dw, dt, &mut out) {
        return Err(Error::NonFinite {
            step,
            context: "Euler-Maruyama update".into(),
        });
    }
    Ok(out)
}

/// Simulated signal and observation increments on a [`TimeGrid`].
///
/// Row `k` holds the state at `t0 + (k+1) dt` and the observation increment
/// over `(t0 + k dt, t0 + (k+1) dt]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthPath {
    pub grid: TimeGrid,
    pub seed: u64,
    pub initial_state: Vec<f64>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub dz: Vec<Vec<f64>>,
}

impl TruthPath {
    pub fn steps(&self) -> usize {
        self.times.len()
    }

    /// State at the start of step `k`.
    pub fn state_before(&self, k: usize) -> &[f64] {
        if k == 0 {
            &self.initial_state
        } else {
            &self.states[k - 1]
        }
    }

    /// SHA-256 of the observation increments (little-endian f64 bytes), hex encoded.
    pub fn dz_hash(&self) -> String {
        hash_increments(&self.dz)
    }

    /// Recomputes every `dZ` row from the recorded states and the observation
    /// noise stream; true when all rows match bit for bit.
    pub fn verify_observations(&self, model: &DynamicsModel) -> bool {
        let stream = NoiseStream::new(self.seed, StreamId::new(Purpose::TruthObservation, 0), model.dim_obs());
        let dt = self.grid.dt;
        let mut h = vec![0.0; model.dim_obs()];
        (0..self.steps()).all(|k| {
            model.observe(self.state_before(k), &mut h);
            let dw = stream.increment_at(k as u64, dt);
            observation_increment(model, &h, &dw, dt) == self.dz[k]
        })
    }

    /// CSV with columns `t, x_1..x_d, dz_1..dz_m`.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let d = self.initial_state.len();
        let m = self.dz.first().map_or(0, Vec::len);
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("x_{i}")));
        header.extend((1..=m).map(|j| format!("dz_{j}")));
        w.write_record(&header)?;
        for k in 0..self.steps() {
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.states[k].iter().map(f64::to_string));
            row.extend(self.dz[k].iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()
    }
}

pub(crate) fn hash_increments(dz: &[Vec<f64>]) -> String {
    let mut hasher = Sha256::new();
    for row in dz {
        for v in row {
            hasher.update(v.to_le_bytes());
        }
    }
    hex::encode(hasher.finalize())
}

fn observation_increment(model: &DynamicsModel, h: &[f64], dw: &[f64], dt: f64) -> Vec<f64> {
    let s = model.obs_noise();
    (0..model.dim_obs())
        .map(|r| h[r] * dt + (0..model.dim_obs()).map(|c| s[(r, c)] * dw[c]).sum::<f64>())
        .collect()
}

/// Forward-simulates the signal and accumulates observation increments.
///
/// The initial state is the model's fixed truth state when present, otherwise
/// a draw from the initial density on the `TruthInit` stream.
pub fn simulate_truth(model: &DynamicsModel, grid: TimeGrid, seed: u64) -> Result<TruthPath> {
    let d = model.dim_state();
    let m = model.dim_obs();
    let x0 = match model.truth_initial() {
        Some(x) => x.iter().copied().collect(),
        None => {
            let mut rng = stream_rng(seed, StreamId::new(Purpose::TruthInit, 0));
            let mut x = vec![0.0; d];
            model.initial().sample_into(&mut rng, &mut x);
            x
        }
    };
    let mut process = NoiseStream::new(seed, StreamId::new(Purpose::TruthProcess, 0), model.dim_process_noise());
    let mut obs = NoiseStream::new(seed, StreamId::new(Purpose::TruthObservation, 0), m);

    let mut times = Vec::with_capacity(grid.steps);
    let mut states = Vec::with_capacity(grid.steps);
    let mut dz = Vec::with_capacity(grid.steps);
    let mut x = x0.clone();
    let mut a = vec![0.0; d];
    let mut h = vec![0.0; m];
    let mut db = vec![0.0; model.dim_process_noise()];
    let mut dw = vec![0.0; m];
    let mut next = vec![0.0; d];
    for k in 0..grid.steps {
        model.drift(&x, &mut a);
        model.observe(&x, &mut h);
        process.next_increment_into(grid.dt, &mut db);
        obs.next_increment_into(grid.dt, &mut dw);
        dz.push(observation_increment(model, &h, &dw, grid.dt));
        let finite = em_update(&x, &a, model.process_noise(), &db, grid.dt, &mut next);
        let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !finite || norm > BLOW_UP_NORM {
            return Err(Error::BlowUp { step: k, norm });
        }
        std::mem::swap(&mut x, &mut next);
        times.push(grid.time_after(k));
        states.push(x.clone());
    }
    Ok(TruthPath {
        grid,
        seed,
        initial_state: x0,
        times,
        states,
        dz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_linear_model, scalar_polynomial_model, InitialDensitySpec, Polynomial};
    use nalgebra::DVector;

    #[test]
    fn increment_shape_and_determinism() {
        let id = StreamId::new(Purpose::ParticleProcess, 3);
        let mut a = NoiseStream::new(11, id, 3);
        let mut b = NoiseStream::new(11, id, 3);
        let x = wiener_increment(&mut a, 0.1).unwrap();
        assert_eq!(x.len(), 3);
        assert_eq!(x, wiener_increment(&mut b, 0.1).unwrap());
        assert!(wiener_increment(&mut a, 0.0).is_err());
    }

    #[test]
    fn replay_by_counter_matches_sequential_draws() {
        for dim in [1, 2, 3, 4] {
            let mut s = NoiseStream::new(5, StreamId::new(Purpose::TruthProcess, 0), dim);
            let draws: Vec<Vec<f64>> = (0..20).map(|_| wiener_increment(&mut s, 0.25).unwrap()).collect();
            for c in [0u64, 1, 7, 19] {
                assert_eq!(s.increment_at(c, 0.25), draws[c as usize], "dim {dim} counter {c}");
            }
        }
    }

    #[test]
    fn unit_variance_increments() {
        let mut s = NoiseStream::new(1, StreamId::new(Purpose::Sampling, 0), 1);
        let n = 1_000_000;
        let mut buf = [0.0];
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            s.next_increment_into(1.0, &mut buf);
            sum += buf[0];
            sq += buf[0] * buf[0];
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        // Standard error of the sample variance is sqrt(2/n) ~ 0.0014.
        assert!((var - 1.0).abs() < 0.005, "variance {var}");
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let mut a = NoiseStream::new(2, StreamId::new(Purpose::ParticleProcess, 0), 1);
        let mut b = NoiseStream::new(2, StreamId::new(Purpose::ParticleProcess, 1), 1);
        let mut c = NoiseStream::new(2, StreamId::new(Purpose::TruthProcess, 0), 1);
        let n = 1_000_000;
        let (mut ab, mut ac) = (0.0, 0.0);
        let (mut x, mut y, mut z) = ([0.0], [0.0], [0.0]);
        for _ in 0..n {
            a.next_standard_normals(&mut x);
            b.next_standard_normals(&mut y);
            c.next_standard_normals(&mut z);
            ab += x[0] * y[0];
            ac += x[0] * z[0];
        }
        assert!((ab / n as f64).abs() < 0.01);
        assert!((ac / n as f64).abs() < 0.01);
    }

    #[test]
    fn em_step_examples() {
        let zero = DMatrix::zeros(1, 1);
        assert_eq!(
            euler_maruyama_step(0, &[2.0], &[0.0], &zero, &[0.3], 0.1).unwrap(),
            vec![2.0]
        );
        assert_eq!(
            euler_maruyama_step(0, &[0.0], &[1.0], &zero, &[0.0], 0.5).unwrap(),
            vec![0.5]
        );
        let err = euler_maruyama_step(17, &[f64::NAN], &[1.0], &zero, &[0.0], 0.5).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 17, .. }));
        assert!(euler_maruyama_step(0, &[0.0, 1.0], &[1.0], &zero, &[0.0], 0.5).is_err());
    }

    #[test]
    fn em_does_not_mutate_input() {
        let x = vec![1.0, 2.0];
        let g = DMatrix::identity(2, 2);
        let out = euler_maruyama_step(0, &x, &[1.0, 1.0], &g, &[0.1, 0.2], 0.1).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
        assert_ne!(out, x);
    }

    #[test]
    fn ou_zero_noise_matches_exponential() {
        // x' = -x from 1 over unit time: e^{-1}; EM error ~ dt/2 * e^{-1}.
        let zero = DMatrix::zeros(1, 1);
        let mut x = vec![1.0];
        for k in 0..1000 {
            let a = [-x[0]];
            x = euler_maruyama_step(k, &x, &a, &zero, &[0.0], 1e-3).unwrap();
        }
        assert!((x[0] - (-1.0f64).exp()).abs() < 1e-3);
    }

    fn quiet_scalar(drift: Vec<f64>, h: Vec<f64>, process: f64) -> DynamicsModel {
        let init = InitialDensitySpec::gaussian(DVector::from_element(1, 0.5), DMatrix::identity(1, 1)).unwrap();
        scalar_polynomial_model(Polynomial::new(drift), Polynomial::new(h), init, process, 1.0).unwrap()
    }

    #[test]
    fn zero_drift_zero_noise_path_is_constant() {
        let model = quiet_scalar(vec![0.0], vec![0.0, 1.0], 0.0);
        let truth = simulate_truth(&model, TimeGrid::new(0.0, 0.01, 100).unwrap(), 3).unwrap();
        assert!(truth.states.iter().all(|s| s[0] == truth.initial_state[0]));
    }

    #[test]
    fn zero_observation_gives_pure_noise_increments() {
        let model = quiet_scalar(vec![0.0, -1.0], vec![0.0], 1.0);
        let dt = 0.01;
        let truth = simulate_truth(&model, TimeGrid::new(0.0, dt, 200_000).unwrap(), 8).unwrap();
        let n = truth.steps() as f64;
        let var = truth.dz.iter().map(|r| r[0] * r[0]).sum::<f64>() / n;
        // Relative standard error sqrt(2/n) ~ 0.0032.
        assert!((var / dt - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "{var}");
        assert!(truth.verify_observations(&model));
    }

    #[test]
    fn truth_is_deterministic_under_seed() {
        let model = quiet_scalar(vec![0.0, -1.0], vec![0.0, 1.0], 1.0);
        let grid = TimeGrid::new(0.0, 0.01, 50).unwrap();
        let a = simulate_truth(&model, grid, 42).unwrap();
        assert_eq!(a, simulate_truth(&model, grid, 42).unwrap());
        assert_ne!(a, simulate_truth(&model, grid, 43).unwrap());
        assert_eq!(a.dz_hash(), simulate_truth(&model, grid, 42).unwrap().dz_hash());
    }

    #[test]
    fn unstable_drift_reports_blow_up() {
        let model = quiet_scalar(vec![0.0, 0.0, 0.0, 1.0], vec![0.0, 1.0], 0.0);
        let model = model.with_truth_initial(DVector::from_element(1, 5.0)).unwrap();
        let err = simulate_truth(&model, TimeGrid::new(0.0, 0.1, 1000).unwrap(), 1).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }));
    }

    #[test]
    fn linear_path_moments_follow_lyapunov_recursion() {
        // Discrete recursion for EM: m' = (1 + a dt) m, P' = (1 + a dt)^2 P + dt.
        let a = -0.5;
        let dt = 1e-3;
        let steps = 500;
        let model = build_linear_model(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 0.25),
        )
        .unwrap();
        let grid = TimeGrid::new(0.0, dt, steps).unwrap();
        let reps = 10_000;
        let finals: Vec<f64> = (0..reps)
            .map(|s| simulate_truth(&model, grid, s).unwrap().states[steps - 1][0])
            .collect();
        let (mut mean, mut var) = (1.0, 0.25);
        for _ in 0..steps {
            mean *= 1.0 + a * dt;
            var = (1.0 + a * dt).powi(2) * var + dt;
        }
        let emp_mean = finals.iter().sum::<f64>() / reps as f64;
        let emp_var = finals.iter().map(|x| (x - emp_mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        assert!((emp_mean - mean).abs() < 3.0 * (var / reps as f64).sqrt());
        assert!((emp_var - var).abs() < 3.0 * var * (2.0 / reps as f64).sqrt());
    }

    #[test]
    fn strong_order_one_for_additive_noise() {
        // OU dX = -X dt + dB. Coarse paths reuse summed fine increments.
        let fine_dt = 1.0 / 4096.0;
        let fine_steps = 4096;
        let paths = 100;
        let run = |incs: &[f64], dt: f64| {
            let mut x = 1.0;
            for dw in incs {
                x += -x * dt + dw;
            }
            x
        };
        let coarsen =
            |incs: &[f64], factor: usize| -> Vec<f64> { incs.chunks(factor).map(|c| c.iter().sum()).collect() };
        let (mut e1, mut e2) = (0.0, 0.0);
        for p in 0..paths {
            let mut s = NoiseStream::new(77, StreamId::new(Purpose::Sampling, p), 1);
            let incs: Vec<f64> = (0..fine_steps)
                .map(|_| wiener_increment(&mut s, fine_dt).unwrap()[0])
                .collect();
            let reference = run(&incs, fine_dt);
            let c1 = coarsen(&incs, 64);
            let c2 = coarsen(&incs, 32);
            e1 += (run(&c1, 64.0 * fine_dt) - reference).abs();
            e2 += (run(&c2, 32.0 * fine_dt) - reference).abs();
        }
        let ratio = e1 / e2;
        assert!((1.7..=2.3).contains(&ratio), "strong error ratio {ratio}");
    }
}
