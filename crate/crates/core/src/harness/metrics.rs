//! Error metrics of filter traces against the truth and against each other.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fpf::FilterTrace;
use crate::gain::{
    dns_gain_1d, poincare_diagnostic, spectral_gap_1d, weighted_l2_error, GainField, PoincareInput, PoincareReport,
};
use crate::kde::{kde_grid, silverman_bandwidth};
use crate::models::DynamicsModel;
use crate::reference::{GaussianBelief, GaussianTrace, GridDensity1D, GridTrace};
use crate::sde::TruthPath;

/// Largest gap between a trace time and the matching truth time.
const TIME_ALIGNMENT_TOL: f64 = 1e-9;

/// Output of one filter run.
#[derive(Clone, Debug)]
pub enum FilterOutput {
    Particle(FilterTrace),
    Gaussian(GaussianTrace),
    Grid(GridTrace),
}

impl FilterOutput {
    pub fn times(&self) -> &[f64] {
        match self {
            Self::Particle(t) => &t.times,
            Self::Gaussian(t) => &t.times,
            Self::Grid(t) => &t.times,
        }
    }

    pub fn len(&self) -> usize {
        self.times().len()
    }

    pub fn is_empty(&self) -> bool {
        self.times().is_empty()
    }

    pub fn mean_at(&self, k: usize) -> Vec<f64> {
        match self {
            Self::Particle(t) => t.stats[k].mean.iter().copied().collect(),
            Self::Gaussian(t) => t.beliefs[k].mean.iter().copied().collect(),
            Self::Grid(t) => vec![t.means[k]],
        }
    }

    pub fn cov_at(&self, k: usize) -> DMatrix<f64> {
        match self {
            Self::Particle(t) => t.stats[k].cov.clone(),
            Self::Gaussian(t) => t.beliefs[k].cov.clone(),
            Self::Grid(t) => DMatrix::from_element(1, 1, t.variances[k]),
        }
    }
}

/// A filter output under its configured name.
#[derive(Clone, Debug)]
pub struct NamedOutput {
    pub name: String,
    pub output: FilterOutput,
}

/// One Smoluchowski probe next to the direct solution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmoluchowskiProbe {
    pub x: f64,
    pub phi_mc: f64,
    pub std_err: f64,
    pub phi_dns: f64,
}

/// Everything written to `metrics.json`. Maps are keyed by filter or
/// strategy name so the serialized order is fixed.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub dz_sha256: Option<String>,
    pub rmse_time_avg: BTreeMap<String, f64>,
    pub rmse_components_time_avg: BTreeMap<String, Vec<f64>>,
    pub moment_reference: Option<String>,
    pub moment_mean_err_max: BTreeMap<String, f64>,
    pub moment_cov_err_max: BTreeMap<String, f64>,
    pub l1_terminal: BTreeMap<String, f64>,
    pub gain_l2_err: BTreeMap<String, f64>,
    pub poincare: BTreeMap<String, Vec<PoincareReport>>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub degenerate_steps: BTreeMap<String, usize>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub galerkin_degenerate: BTreeMap<String, bool>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub smoluchowski: Vec<SmoluchowskiProbe>,
    /// Per-step Euclidean error of each filter mean; written to `rmse.csv`.
    #[serde(skip)]
    pub rmse_series: BTreeMap<String, Vec<f64>>,
}

impl MetricsReport {
    /// Every number in the report is finite.
    pub fn all_finite(&self) -> bool {
        let maps = [
            &self.rmse_time_avg,
            &self.moment_mean_err_max,
            &self.moment_cov_err_max,
            &self.l1_terminal,
            &self.gain_l2_err,
        ];
        maps.iter().all(|m| m.values().all(|v| v.is_finite()))
            && self.rmse_components_time_avg.values().flatten().all(|v| v.is_finite())
            && self
                .poincare
                .values()
                .flatten()
                .all(|r| r.lhs.is_finite() && r.rhs.is_finite())
    }
}

/// Which metrics [`compute_metrics`] evaluates beyond RMSE and moment errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricSelection {
    pub kde_l1: bool,
    pub gain_l2: bool,
    pub poincare: bool,
}

impl Default for MetricSelection {
    fn default() -> Self {
        Self {
            kde_l1: true,
            gain_l2: true,
            poincare: true,
        }
    }
}

/// `|mu_t - X_t|` restricted to `components` at every step.
pub fn error_series(means: &[Vec<f64>], truth: &TruthPath, components: &[usize]) -> Vec<f64> {
    means
        .iter()
        .zip(&truth.states)
        .map(|(m, x)| components.iter().map(|&c| (m[c] - x[c]).powi(2)).sum::<f64>().sqrt())
        .collect()
}

fn time_average(v: &[f64]) -> f64 {
    crate::numerics::pairwise_sum(v) / v.len() as f64
}

fn check_aligned(name: &str, output: &FilterOutput, truth: &TruthPath) -> Result<()> {
    let times = output.times();
    if times.len() != truth.times.len() {
        return Err(Error::Misaligned(format!(
            "`{name}` has {} steps, truth has {}",
            times.len(),
            truth.times.len()
        )));
    }
    if let Some(k) = (0..times.len()).find(|&k| (times[k] - truth.times[k]).abs() > TIME_ALIGNMENT_TOL) {
        return Err(Error::Misaligned(format!(
            "`{name}` step {k} is at t = {}, truth at t = {}",
            times[k], truth.times[k]
        )));
    }
    Ok(())
}

/// Whitened observation channel `j` of a scalar model as a function of `x`.
fn whitened_channel(model: &DynamicsModel, j: usize) -> impl Fn(f64) -> f64 + '_ {
    move |x| {
        let raw = model.observe_vec(&[x]);
        let mut out = vec![0.0; raw.len()];
        model.whiten(&raw, &mut out);
        out[j]
    }
}

/// KDE of a scalar ensemble on the nodes of `grid`, normalized.
pub fn ensemble_density_on(states: &[f64], grid: &GridDensity1D) -> Result<GridDensity1D> {
    let bw = silverman_bandwidth(states)?;
    let mut kde = kde_grid(states, bw, grid.lower(), grid.upper(), grid.len())?;
    kde.normalize()?;
    Ok(kde)
}

/// RMSE against the truth for every output, moment discrepancies against the
/// reference output, and the scalar and Gaussian diagnostics selected.
pub fn compute_metrics(
    model: &DynamicsModel,
    outputs: &[NamedOutput],
    truth: &TruthPath,
    reference: Option<&str>,
    selection: MetricSelection,
) -> Result<MetricsReport> {
    for o in outputs {
        check_aligned(&o.name, &o.output, truth)?;
    }
    let d = model.dim_state();
    let all: Vec<usize> = (0..d).collect();
    let mut report = MetricsReport {
        dz_sha256: Some(truth.dz_hash()),
        ..MetricsReport::default()
    };
    for o in outputs {
        let means: Vec<Vec<f64>> = (0..o.output.len()).map(|k| o.output.mean_at(k)).collect();
        let series = error_series(&means, truth, &all);
        report.rmse_time_avg.insert(o.name.clone(), time_average(&series));
        let per_component = (0..d)
            .map(|c| time_average(&error_series(&means, truth, &[c])))
            .collect();
        report.rmse_components_time_avg.insert(o.name.clone(), per_component);
        report.rmse_series.insert(o.name.clone(), series);
        if let FilterOutput::Particle(t) = &o.output {
            report.degenerate_steps.insert(o.name.clone(), t.degenerate_steps);
        }
    }

    let reference = match reference {
        Some(r) => Some(
            outputs
                .iter()
                .find(|o| o.name == r)
                .ok_or_else(|| Error::Unsupported(format!("no output named `{r}`")))?,
        ),
        None => outputs
            .iter()
            .find(|o| matches!(o.output, FilterOutput::Gaussian(_)))
            .or_else(|| outputs.iter().find(|o| matches!(o.output, FilterOutput::Grid(_)))),
    };
    if let Some(r) = reference {
        report.moment_reference = Some(r.name.clone());
        for o in outputs.iter().filter(|o| o.name != r.name) {
            let mut mean_err: f64 = 0.0;
            let mut cov_err: f64 = 0.0;
            for k in 0..o.output.len() {
                let dm: f64 = o
                    .output
                    .mean_at(k)
                    .iter()
                    .zip(r.output.mean_at(k))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                mean_err = mean_err.max(dm);
                cov_err = cov_err.max((o.output.cov_at(k) - r.output.cov_at(k)).norm());
            }
            report.moment_mean_err_max.insert(o.name.clone(), mean_err);
            report.moment_cov_err_max.insert(o.name.clone(), cov_err);
        }
    }

    let grid = outputs.iter().find_map(|o| match &o.output {
        FilterOutput::Grid(g) => Some(g),
        _ => None,
    });
    if let (Some(grid), true) = (grid, d == 1) {
        let terminal = &grid.terminal;
        let dns = if selection.gain_l2 || selection.poincare {
            let h = whitened_channel(model, 0);
            Some(dns_gain_1d(terminal, &h)?)
        } else {
            None
        };
        for o in outputs {
            let FilterOutput::Particle(t) = &o.output else { continue };
            if selection.kde_l1 {
                let kde = ensemble_density_on(&t.final_states, terminal)?;
                report.l1_terminal.insert(o.name.clone(), kde.l1_distance(terminal));
            }
            if let (Some(dns), Some(gain), true) = (&dns, &t.final_gain, selection.gain_l2) {
                report
                    .gain_l2_err
                    .insert(o.name.clone(), weighted_l2_error(gain, 0, dns));
            }
        }
        if let (Some(dns), true) = (&dns, selection.poincare) {
            let name = outputs
                .iter()
                .find(|o| matches!(o.output, FilterOutput::Grid(_)))
                .map(|o| o.name.clone())
                .unwrap_or_default();
            let h = whitened_channel(model, 0);
            let lambda = spectral_gap_1d(terminal)?;
            let r = poincare_diagnostic(PoincareInput::Grid {
                density: terminal,
                h: &h,
                gain: &dns.to_gain_field(),
                lambda: Some(lambda),
            })?;
            report.poincare.insert(format!("{name}_terminal"), r);
        }
    }

    if selection.poincare {
        if let Some(h_lin) = model.linear_obs() {
            let h_white = model.obs_noise_inv() * h_lin;
            for o in outputs {
                let FilterOutput::Gaussian(t) = &o.output else { continue };
                let Some(belief) = t.beliefs.last() else { continue };
                report
                    .poincare
                    .insert(format!("{}_terminal", o.name), gaussian_poincare(belief, &h_white)?);
            }
        }
    }
    Ok(report)
}

fn gaussian_poincare(belief: &GaussianBelief, h: &DMatrix<f64>) -> Result<Vec<PoincareReport>> {
    let gain = GainField::Kalman(&belief.cov * h.transpose());
    let hm = h.clone();
    poincare_diagnostic(PoincareInput::Gaussian {
        belief,
        h: &move |x: &[f64], out: &mut [f64]| {
            for (j, o) in out.iter_mut().enumerate() {
                *o = (0..x.len()).map(|c| hm[(j, c)] * x[c]).sum();
            }
        },
        gain: &gain,
        lambda: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fpf::EnsembleStats;
    use crate::sde::TimeGrid;
    use nalgebra::DVector;

    fn truth() -> TruthPath {
        TruthPath {
            grid: TimeGrid::new(0.0, 0.1, 3).unwrap(),
            seed: 0,
            initial_state: vec![0.0],
            times: vec![0.1, 0.2, 0.30000000000000004],
            states: vec![vec![1.0], vec![2.0], vec![3.0]],
            dz: vec![vec![0.0]; 3],
        }
    }

    fn gaussian_trace(means: &[f64], times: &[f64]) -> FilterOutput {
        FilterOutput::Gaussian(GaussianTrace {
            times: times.to_vec(),
            beliefs: means
                .iter()
                .map(|m| GaussianBelief::new(DVector::from_element(1, *m), DMatrix::identity(1, 1)).unwrap())
                .collect(),
        })
    }

    fn model() -> DynamicsModel {
        crate::models::build_linear_model(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    #[test]
    fn perfect_mean_has_zero_rmse() {
        let t = truth();
        let out = vec![NamedOutput {
            name: "kb".into(),
            output: gaussian_trace(&[1.0, 2.0, 3.0], &t.times),
        }];
        let r = compute_metrics(&model(), &out, &t, None, MetricSelection::default()).unwrap();
        assert_eq!(r.rmse_time_avg["kb"], 0.0);
        assert!(r.all_finite());
    }

    #[test]
    fn identical_traces_have_zero_discrepancy() {
        let t = truth();
        let out = vec![
            NamedOutput {
                name: "a".into(),
                output: gaussian_trace(&[1.5, 2.0, 2.0], &t.times),
            },
            NamedOutput {
                name: "b".into(),
                output: gaussian_trace(&[1.5, 2.0, 2.0], &t.times),
            },
        ];
        let r = compute_metrics(&model(), &out, &t, Some("a"), MetricSelection::default()).unwrap();
        assert_eq!(r.moment_mean_err_max["b"], 0.0);
        assert_eq!(r.moment_cov_err_max["b"], 0.0);
        assert!((r.rmse_time_avg["b"] - (0.5 + 0.0 + 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn misaligned_grids_are_rejected() {
        let t = truth();
        let short = vec![NamedOutput {
            name: "x".into(),
            output: gaussian_trace(&[1.0, 2.0], &t.times[..2]),
        }];
        assert!(matches!(
            compute_metrics(&model(), &short, &t, None, MetricSelection::default()),
            Err(Error::Misaligned(_))
        ));
        let shifted = vec![NamedOutput {
            name: "x".into(),
            output: gaussian_trace(&[1.0, 2.0, 3.0], &[0.1, 0.2, 0.4]),
        }];
        assert!(compute_metrics(&model(), &shifted, &t, None, MetricSelection::default()).is_err());
    }

    #[test]
    fn particle_trace_counts_degeneracy() {
        let t = truth();
        let stats = |m: f64| EnsembleStats {
            mean: DVector::from_element(1, m),
            cov: DMatrix::identity(1, 1),
            h_hat: vec![m],
        };
        let out = vec![NamedOutput {
            name: "p".into(),
            output: FilterOutput::Particle(FilterTrace {
                times: t.times.clone(),
                stats: vec![stats(1.0), stats(2.0), stats(3.0)],
                snapshots: vec![],
                final_states: vec![2.9, 3.1],
                final_gain: None,
                degenerate_steps: 2,
                dz_hash: t.dz_hash(),
                dim_state: 1,
            }),
        }];
        let r = compute_metrics(&model(), &out, &t, None, MetricSelection::default()).unwrap();
        assert_eq!(r.degenerate_steps["p"], 2);
        assert_eq!(r.rmse_time_avg["p"], 0.0);
    }
}
