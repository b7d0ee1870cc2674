//! Experiment configuration: a strict TOML schema plus validation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::error::{config, Result};
use crate::models::{
    build_linear_model, scalar_polynomial_model, BearingOnlyScenario, DynamicsModel, InitialDensitySpec,
    MixtureDensity1D, Polynomial,
};
use crate::reference::{max_stable_dt, KsGridOptions};
use crate::sde::TimeGrid;

/// The only schema version this build understands.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    pub model: Option<ModelConfig>,
    pub time: Option<TimeConfig>,
    #[serde(default)]
    pub filters: Vec<FilterConfig>,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub gain_bench: Option<GainBenchConfig>,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `dX = A X dt + G dB`, `dZ = H X dt + S dW`.
    Linear {
        a: Vec<Vec<f64>>,
        h: Vec<Vec<f64>>,
        initial_mean: Vec<f64>,
        initial_cov: Vec<Vec<f64>>,
        process_noise: Option<Vec<Vec<f64>>>,
        obs_noise: Option<Vec<Vec<f64>>>,
        truth_initial: Option<Vec<f64>>,
    },
    /// Scalar model with polynomial drift and observation (coefficients in
    /// increasing degree).
    Scalar {
        drift: Vec<f64>,
        observation: Vec<f64>,
        initial: DensityConfig,
        #[serde(default = "one")]
        process_scale: f64,
        #[serde(default = "one")]
        obs_scale: f64,
        truth_initial: Option<f64>,
    },
    /// Two-sensor bearing-only tracking; omitted fields take the default scenario values.
    BearingOnly {
        sigma_b: Option<f64>,
        sigma_w: Option<f64>,
        sensors: Option<[[f64; 2]; 2]>,
        initial_state: Option<[f64; 4]>,
        particle_mean: Option<[f64; 4]>,
        particle_cov_diag: Option<[f64; 4]>,
    },
}

fn one() -> f64 {
    1.0
}

/// A scalar density.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityConfig {
    Gaussian {
        mean: f64,
        var: f64,
    },
    Mixture {
        weights: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
    },
    BenchmarkMixture,
}

impl DensityConfig {
    pub fn to_initial(&self, field: &str) -> Result<InitialDensitySpec> {
        match self {
            Self::Gaussian { mean, var } => {
                InitialDensitySpec::gaussian(DVector::from_element(1, *mean), DMatrix::from_element(1, 1, *var))
                    .map_err(|e| config(field, e.to_string()))
            }
            _ => Ok(InitialDensitySpec::Mixture1d(self.to_mixture(field)?)),
        }
    }

    pub fn to_mixture(&self, field: &str) -> Result<MixtureDensity1D> {
        match self {
            Self::Gaussian { mean, var } => MixtureDensity1D::new(vec![1.0], vec![*mean], vec![*var]),
            Self::Mixture {
                weights,
                means,
                variances,
            } => MixtureDensity1D::new(weights.clone(), means.clone(), variances.clone()),
            Self::BenchmarkMixture => Ok(MixtureDensity1D::default_benchmark()),
        }
        .map_err(|e| config(field, e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    #[serde(default)]
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Fpf,
    KalmanBucy,
    KsGrid,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum GainKind {
    Kalman,
    Constant,
    Galerkin,
    DnsKde,
    Zero,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LinearizationKind {
    #[default]
    Exact,
    AboutTruth,
}

/// One filter of an experiment. Fields that do not apply to `kind` are rejected.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub kind: FilterKind,
    pub name: Option<String>,
    // Particle filter.
    pub gain: Option<GainKind>,
    pub particles: Option<usize>,
    pub cells: Option<usize>,
    pub gain_clip: Option<f64>,
    pub seed: Option<u64>,
    // Kalman–Bucy.
    pub linearization: Option<LinearizationKind>,
    // Grid.
    pub dx: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub substeps: Option<usize>,
}

/// Default grid spacing of the Kushner–Stratonovich reference.
pub const DEFAULT_GRID_DX: f64 = 0.01;
/// Default half-width of the grid domain, in initial standard deviations.
pub const DEFAULT_GRID_RADIUS: f64 = 8.0;
/// Default number of Galerkin cells.
pub const DEFAULT_GALERKIN_CELLS: usize = 5;

impl FilterConfig {
    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match (self.kind, self.gain) {
            (FilterKind::Fpf, Some(g)) => format!("fpf_{}", gain_label(g)),
            (FilterKind::Fpf, None) => "fpf".into(),
            (FilterKind::KalmanBucy, _) => "kalman_bucy".into(),
            (FilterKind::KsGrid, _) => "ks_grid".into(),
        }
    }

    /// Grid options, defaulting to `initial mean +- 8 std` at `dx = 0.01`.
    pub fn grid_options(&self, model: &DynamicsModel) -> KsGridOptions {
        let mut opts = KsGridOptions::around_initial(
            model.initial(),
            DEFAULT_GRID_RADIUS,
            self.dx.unwrap_or(DEFAULT_GRID_DX),
            self.substeps.unwrap_or(1),
        );
        if let Some(l) = self.lower {
            opts.lower = l;
        }
        if let Some(u) = self.upper {
            opts.upper = u;
        }
        opts
    }
}

pub fn gain_label(g: GainKind) -> &'static str {
    match g {
        GainKind::Kalman => "kalman",
        GainKind::Constant => "constant",
        GainKind::Galerkin => "galerkin",
        GainKind::DnsKde => "dns_kde",
        GainKind::Zero => "zero",
    }
}

/// Which metrics to compute.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Filter whose moments the others are compared against; defaults to the
    /// first Kalman–Bucy filter, else the first grid filter.
    pub reference: Option<String>,
    #[serde(default = "yes")]
    pub kde_l1: bool,
    #[serde(default = "yes")]
    pub gain_l2: bool,
    #[serde(default = "yes")]
    pub poincare: bool,
}

fn yes() -> bool {
    true
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            reference: None,
            kde_l1: true,
            gain_l2: true,
            poincare: true,
        }
    }
}

/// Static gain benchmark: gain solvers against a fixed density.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GainBenchConfig {
    #[serde(default = "benchmark_density")]
    pub density: DensityConfig,
    /// Observation polynomial, coefficients in increasing degree.
    #[serde(default = "square")]
    pub observation: Vec<f64>,
    #[serde(default = "default_cells")]
    pub cells: Vec<usize>,
    #[serde(default = "default_bench_particles")]
    pub particles: usize,
    /// Galerkin partition domain.
    #[serde(default = "galerkin_domain")]
    pub galerkin_domain: [f64; 2],
    /// Direct-solution grid domain and spacing.
    #[serde(default = "dns_domain")]
    pub dns_domain: [f64; 2],
    #[serde(default = "dns_dx")]
    pub dns_dx: f64,
    pub smoluchowski: Option<SmoluchowskiBenchConfig>,
}

fn benchmark_density() -> DensityConfig {
    DensityConfig::BenchmarkMixture
}
fn square() -> Vec<f64> {
    vec![0.0, 0.0, 1.0]
}
fn default_cells() -> Vec<usize> {
    vec![1, 5, 15]
}
fn default_bench_particles() -> usize {
    1000
}
fn galerkin_domain() -> [f64; 2] {
    [-3.0, 3.0]
}
fn dns_domain() -> [f64; 2] {
    [-6.0, 6.0]
}
fn dns_dx() -> f64 {
    1e-3
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SmoluchowskiBenchConfig {
    pub probes: Vec<f64>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_mc_dt")]
    pub dt: f64,
}

fn default_replicates() -> usize {
    10_000
}
fn default_horizon() -> f64 {
    20.0
}
fn default_mc_dt() -> f64 {
    0.01
}

fn matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(config(field, "expected a non-empty rectangular array of rows"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl ModelConfig {
    pub fn build(&self) -> Result<DynamicsModel> {
        let wrap = |e: crate::Error| config("model", e.to_string());
        match self {
            Self::Linear {
                a,
                h,
                initial_mean,
                initial_cov,
                process_noise,
                obs_noise,
                truth_initial,
            } => {
                let mut model = build_linear_model(
                    matrix(a, "model.a")?,
                    matrix(h, "model.h")?,
                    DVector::from_column_slice(initial_mean),
                    matrix(initial_cov, "model.initial_cov")?,
                )
                .map_err(wrap)?;
                if let Some(g) = process_noise {
                    model = model
                        .with_process_noise(matrix(g, "model.process_noise")?)
                        .map_err(wrap)?;
                }
                if let Some(s) = obs_noise {
                    model = model.with_obs_noise(matrix(s, "model.obs_noise")?).map_err(wrap)?;
                }
                if let Some(x0) = truth_initial {
                    model = model.with_truth_initial(DVector::from_column_slice(x0)).map_err(wrap)?;
                }
                Ok(model)
            }
            Self::Scalar {
                drift,
                observation,
                initial,
                process_scale,
                obs_scale,
                truth_initial,
            } => {
                let mut model = scalar_polynomial_model(
                    Polynomial::new(drift.clone()),
                    Polynomial::new(observation.clone()),
                    initial.to_initial("model.initial")?,
                    *process_scale,
                    *obs_scale,
                )
                .map_err(wrap)?;
                if let Some(x0) = truth_initial {
                    model = model.with_truth_initial(DVector::from_element(1, *x0)).map_err(wrap)?;
                }
                Ok(model)
            }
            Self::BearingOnly { .. } => self.bearing_scenario()?.to_model().map_err(wrap),
        }
    }

    /// The bearing scenario with overrides applied; an error for other kinds.
    pub fn bearing_scenario(&self) -> Result<BearingOnlyScenario> {
        let Self::BearingOnly {
            sigma_b,
            sigma_w,
            sensors,
            initial_state,
            particle_mean,
            particle_cov_diag,
        } = self
        else {
            return Err(config("model.kind", "not a bearing-only model"));
        };
        let mut s = BearingOnlyScenario::default_scenario();
        if let Some(v) = sigma_b {
            s.sigma_b = *v;
        }
        if let Some(v) = sigma_w {
            s.sigma_w = *v;
        }
        if let Some(v) = sensors {
            s.sensors = *v;
        }
        if let Some(v) = initial_state {
            s.initial_state = *v;
            s.particle_mean = *v;
        }
        if let Some(v) = particle_mean {
            s.particle_mean = *v;
        }
        if let Some(v) = particle_cov_diag {
            s.particle_cov = DMatrix::from_diagonal(&DVector::from_row_slice(v));
        }
        Ok(s)
    }
}

/// Reads and validates a config file. Parse errors carry line and column.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| config("<file>", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Parses and validates config text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn parse_error(text: &str, e: &toml::de::Error) -> crate::Error {
    let location = e.span().map(|span| {
        let before = &text[..span.start.min(text.len())];
        let line = before.matches('\n').count() + 1;
        let col = before.rfind('\n').map_or(before.len(), |p| before.len() - p - 1) + 1;
        format!("line {line}, column {col}: ")
    });
    let field = field_from_message(e.message()).unwrap_or_else(|| "<toml>".into());
    config(field, format!("{}{}", location.unwrap_or_default(), e.message()))
}

fn field_from_message(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

/// Schema-level checks beyond what deserialization enforces.
pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    if cfg.schema != SCHEMA_VERSION {
        return Err(config(
            "schema",
            format!("unsupported schema {}, expected {SCHEMA_VERSION}", cfg.schema),
        ));
    }
    if cfg.snapshot_times.iter().any(|t| !t.is_finite()) {
        return Err(config("snapshot_times", "times must be finite"));
    }
    if let Some(bench) = &cfg.gain_bench {
        validate_bench(bench)?;
    }
    if cfg.filters.is_empty() {
        if cfg.gain_bench.is_none() {
            return Err(config("filters", "at least one filter is required"));
        }
        return Ok(());
    }
    let model_cfg = cfg
        .model
        .as_ref()
        .ok_or_else(|| config("model", "required when filters are configured"))?;
    let time = cfg
        .time
        .ok_or_else(|| config("time", "required when filters are configured"))?;
    TimeGrid::new(time.t0, time.dt, time.steps).map_err(|e| config("time", e.to_string()))?;
    let model = model_cfg.build()?;

    let mut names = BTreeSet::new();
    for (i, f) in cfg.filters.iter().enumerate() {
        let at = |field: &str| format!("filters[{i}].{field}");
        let name = f.display_name();
        if !names.insert(name.clone()) {
            return Err(config(at("name"), format!("duplicate filter name `{name}`")));
        }
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(config(at("name"), "use letters, digits, `_` or `-`"));
        }
        let misplaced = |present: bool, field: &str| {
            if present {
                Err(config(at(field), format!("not applicable to a {:?} filter", f.kind)))
            } else {
                Ok(())
            }
        };
        let particle_fields = f.gain.is_some() || f.particles.is_some() || f.cells.is_some() || f.gain_clip.is_some();
        let grid_fields = f.dx.is_some() || f.lower.is_some() || f.upper.is_some() || f.substeps.is_some();
        match f.kind {
            FilterKind::Fpf => {
                misplaced(f.linearization.is_some(), "linearization")?;
                misplaced(grid_fields, "dx")?;
                let gain = f.gain.ok_or_else(|| config(at("gain"), "required for fpf filters"))?;
                match f.particles {
                    Some(n) if n >= 2 => {}
                    _ => return Err(config(at("particles"), "need at least 2 particles")),
                }
                if f.cells.is_some() && gain != GainKind::Galerkin {
                    return Err(config(at("cells"), "only used by the galerkin gain"));
                }
                if f.cells == Some(0) {
                    return Err(config(at("cells"), "need at least one cell"));
                }
                if let Some(c) = f.gain_clip {
                    if !(c > 0.0) {
                        return Err(config(at("gain_clip"), "must be positive"));
                    }
                }
                if matches!(gain, GainKind::Galerkin | GainKind::DnsKde) && model.dim_state() != 1 {
                    return Err(config(at("gain"), "this gain needs a scalar state"));
                }
            }
            FilterKind::KalmanBucy => {
                misplaced(particle_fields || f.seed.is_some(), "gain")?;
                misplaced(grid_fields, "dx")?;
                if model.linear_drift().is_none() {
                    return Err(config(at("kind"), "the Kalman-Bucy filter needs a linear drift"));
                }
                let lin = f.linearization.unwrap_or_default();
                if lin == LinearizationKind::Exact && model.linear_obs().is_none() {
                    return Err(config(
                        at("linearization"),
                        "non-linear observations need `about_truth`",
                    ));
                }
            }
            FilterKind::KsGrid => {
                misplaced(particle_fields || f.seed.is_some(), "gain")?;
                misplaced(f.linearization.is_some(), "linearization")?;
                if model.dim_state() != 1 {
                    return Err(config(at("kind"), "the grid filter needs a scalar state"));
                }
                let opts = f.grid_options(&model);
                if !(opts.dx > 0.0) || !(opts.upper > opts.lower) {
                    return Err(config(at("dx"), "need dx > 0 and upper > lower"));
                }
                if opts.substeps == 0 {
                    return Err(config(at("substeps"), "must be at least 1"));
                }
                let nodes = ((opts.upper - opts.lower) / opts.dx).round() as usize + 1;
                let max_drift = (0..nodes - 1)
                    .map(|i| model.drift_vec(&[opts.lower + (i as f64 + 0.5) * opts.dx])[0].abs())
                    .fold(0.0, f64::max);
                let limit = max_stable_dt(opts.dx, max_drift) * opts.substeps as f64;
                if time.dt > limit {
                    return Err(config(
                        "time.dt",
                        format!(
                            "dt = {:e} exceeds the grid stability limit {limit:e} for `{name}`; \
                             lower dt or raise `substeps`",
                            time.dt
                        ),
                    ));
                }
            }
        }
    }
    if let Some(r) = &cfg.metrics.reference {
        if !names.contains(r) {
            return Err(config("metrics.reference", format!("no filter named `{r}`")));
        }
    }
    Ok(())
}

fn validate_bench(b: &GainBenchConfig) -> Result<()> {
    b.density.to_mixture("gain_bench.density")?;
    if b.observation.is_empty() {
        return Err(config("gain_bench.observation", "need at least one coefficient"));
    }
    if b.cells.is_empty() || b.cells.contains(&0) {
        return Err(config("gain_bench.cells", "need positive cell counts"));
    }
    if b.particles < 2 {
        return Err(config("gain_bench.particles", "need at least 2 particles"));
    }
    if !(b.galerkin_domain[1] > b.galerkin_domain[0]) {
        return Err(config("gain_bench.galerkin_domain", "need lower < upper"));
    }
    if !(b.dns_domain[1] > b.dns_domain[0]) || !(b.dns_dx > 0.0) {
        return Err(config("gain_bench.dns_domain", "need lower < upper and dns_dx > 0"));
    }
    if let Some(s) = &b.smoluchowski {
        if s.probes.is_empty() || s.replicates == 0 || !(s.horizon > 0.0) || !(s.dt > 0.0) {
            return Err(config(
                "gain_bench.smoluchowski",
                "need probes and positive replicates, horizon, dt",
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    const LINEAR: &str = r#"
schema = 1
seed = 7
output_dir = "out"

[model]
kind = "linear"
a = [[-0.5]]
h = [[1.0]]
initial_mean = [0.0]
initial_cov = [[1.0]]

[time]
dt = 0.001
steps = 100

[[filters]]
kind = "fpf"
gain = "kalman"
particles = 100

[[filters]]
kind = "kalman_bucy"
"#;

    fn field_of(e: Error) -> String {
        match e {
            Error::Config { field, .. } => field,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn minimal_linear_config_gets_defaults() {
        let cfg = parse_config(LINEAR).unwrap();
        assert_eq!(cfg.time.unwrap().t0, 0.0);
        assert!(cfg.snapshot_times.is_empty());
        assert_eq!(cfg.metrics, MetricsConfig::default());
        assert_eq!(cfg.filters[0].display_name(), "fpf_kalman");
        assert_eq!(
            cfg.filters[1].linearization.unwrap_or_default(),
            LinearizationKind::Exact
        );
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let text = LINEAR.replace("steps = 100", "steps = 100\nstep_size = 2");
        let err = parse_config(&text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step_size") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn cfl_violation_names_time_dt() {
        let text = r#"
schema = 1
seed = 1
output_dir = "o"
[model]
kind = "scalar"
drift = [0.0, -1.0]
observation = [0.0, 1.0]
initial = { kind = "gaussian", mean = 0.0, var = 0.5 }
[time]
dt = 0.001
steps = 10
[[filters]]
kind = "ks_grid"
dx = 0.01
"#;
        assert_eq!(field_of(parse_config(text).unwrap_err()), "time.dt");
        let fixed = text.replace("dx = 0.01", "dx = 0.01\nsubsteps = 25");
        parse_config(&fixed).unwrap();
    }

    #[test]
    fn bearing_config_uses_default_noise() {
        let text = r#"
schema = 1
seed = 1
output_dir = "o"
[model]
kind = "bearing_only"
[time]
dt = 0.01
steps = 10
[[filters]]
kind = "fpf"
gain = "constant"
particles = 200
"#;
        let cfg = parse_config(text).unwrap();
        let s = cfg.model.unwrap().bearing_scenario().unwrap();
        assert_eq!(s.sigma_w, 0.017);
        assert_eq!(s.sigma_b, 0.1);
    }

    #[test]
    fn schema_and_filters_are_checked() {
        assert_eq!(
            field_of(parse_config(&LINEAR.replace("schema = 1", "schema = 2")).unwrap_err()),
            "schema"
        );
        let no_filters = LINEAR.split("[[filters]]").next().unwrap();
        assert_eq!(field_of(parse_config(no_filters).unwrap_err()), "filters");
        let dup = format!("{LINEAR}\n[[filters]]\nkind = \"kalman_bucy\"\n");
        assert_eq!(field_of(parse_config(&dup).unwrap_err()), "filters[2].name");
        let misplaced = LINEAR.replace("kind = \"kalman_bucy\"", "kind = \"kalman_bucy\"\nparticles = 3");
        assert_eq!(field_of(parse_config(&misplaced).unwrap_err()), "filters[1].gain");
    }

    #[test]
    fn gain_bench_only_config() {
        let text = "schema = 1\nseed = 3\noutput_dir = \"o\"\n[gain_bench]\n";
        let cfg = parse_config(text).unwrap();
        let b = cfg.gain_bench.unwrap();
        assert_eq!(b.cells, vec![1, 5, 15]);
        assert_eq!(b.density, DensityConfig::BenchmarkMixture);
    }
}
