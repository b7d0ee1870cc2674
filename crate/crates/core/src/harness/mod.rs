//! Config-driven experiments: one truth path, every configured filter on
//! the same observation increments, metrics and plot-ready files.

pub mod config;
pub mod metrics;

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::fpf::{run_fpf, FpfOptions, GainStrategy};
use crate::gain::{
    constant_gain, dns_gain_1d, galerkin_gain, poincare_diagnostic, smoluchowski_phi_mc, spectral_gap_1d,
    weighted_l2_error, GainField, GalerkinBasis1D, GalerkinSource, PoincareInput, SmoluchowskiSpec,
};
use crate::models::{DynamicsModel, Polynomial};
use crate::reference::{run_kalman_bucy, run_ks_grid, GridDensity1D, Linearization};
use crate::sde::{simulate_truth, stream_rng, Purpose, StreamId, TimeGrid, TruthPath};

pub use config::{load_config, parse_config, ExperimentConfig};
pub use metrics::{
    compute_metrics, ensemble_density_on, error_series, FilterOutput, MetricSelection, MetricsReport, NamedOutput,
};

use config::{FilterConfig, FilterKind, GainBenchConfig, GainKind, LinearizationKind, DEFAULT_GALERKIN_CELLS};
use metrics::SmoluchowskiProbe;

/// Name of the marker file left behind by a failed run.
pub const FAILURE_MARKER: &str = "FAILED";

/// Seed for filter `index` when the filter does not set its own.
pub fn filter_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs the experiment and writes its files under `config.output_dir`.
///
/// On error the files written so far stay in place next to a `FAILED`
/// marker holding the error message.
pub fn run_experiment(config: &ExperimentConfig) -> Result<MetricsReport> {
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    let marker = out.join(FAILURE_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let result = run_inner(config, out);
    if let Err(e) = &result {
        let mut f = fs::File::create(&marker)?;
        writeln!(f, "{e}")?;
    }
    result
}

fn run_inner(config: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    let mut report = if config.filters.is_empty() {
        MetricsReport::default()
    } else {
        run_filters(config, out)?
    };
    if let Some(bench) = &config.gain_bench {
        let b = run_gain_bench(bench, config.seed, out).map_err(|e| e.context("gain benchmark"))?;
        report.gain_l2_err.extend(b.gain_l2_err);
        report.poincare.extend(b.poincare);
        report.galerkin_degenerate = b.galerkin_degenerate;
        report.smoluchowski = b.smoluchowski;
    }
    write_metrics(&report, &out.join("metrics.json"))?;
    Ok(report)
}

/// `metrics.json` as pretty-printed JSON with a trailing newline.
pub fn write_metrics(report: &MetricsReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Io(e.into()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn strategy_for(f: &FilterConfig) -> GainStrategy {
    match f.gain.unwrap_or(GainKind::Kalman) {
        GainKind::Kalman => GainStrategy::KalmanFromEnsemble,
        GainKind::Constant => GainStrategy::Constant,
        GainKind::Galerkin => GainStrategy::Galerkin {
            cells: f.cells.unwrap_or(DEFAULT_GALERKIN_CELLS),
        },
        GainKind::DnsKde => GainStrategy::DnsKde,
        GainKind::Zero => GainStrategy::Zero,
    }
}

/// Runs one configured filter along `truth`.
pub fn run_filter(
    f: &FilterConfig,
    index: usize,
    model: &DynamicsModel,
    truth: &TruthPath,
    seed: u64,
    snapshot_times: &[f64],
) -> Result<FilterOutput> {
    match f.kind {
        FilterKind::Fpf => {
            let options = FpfOptions {
                gain_clip: f.gain_clip,
                snapshot_times: snapshot_times.to_vec(),
            };
            let n = f.particles.unwrap_or(0);
            let s = f.seed.unwrap_or_else(|| filter_seed(seed, index));
            run_fpf(model, &strategy_for(f), truth, n, s, &options).map(FilterOutput::Particle)
        }
        FilterKind::KalmanBucy => {
            let lin = match f.linearization.unwrap_or_default() {
                LinearizationKind::Exact => Linearization::Exact,
                LinearizationKind::AboutTruth => Linearization::AboutTruth,
            };
            run_kalman_bucy(model, truth, lin).map(FilterOutput::Gaussian)
        }
        FilterKind::KsGrid => run_ks_grid(model, truth, &f.grid_options(model), snapshot_times).map(FilterOutput::Grid),
    }
}

fn run_filters(config: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    let model = config
        .model
        .as_ref()
        .ok_or_else(|| crate::error::config("model", "required when filters are configured"))?
        .build()?;
    let time = config
        .time
        .ok_or_else(|| crate::error::config("time", "required when filters are configured"))?;
    let grid = TimeGrid::new(time.t0, time.dt, time.steps)?;
    let truth = simulate_truth(&model, grid, config.seed).map_err(|e| e.context("truth simulation"))?;
    truth.write_csv(&out.join("truth.csv"))?;

    let grid_filters = config.filters.iter().filter(|f| f.kind == FilterKind::KsGrid).count();
    let mut outputs = Vec::with_capacity(config.filters.len());
    for (i, f) in config.filters.iter().enumerate() {
        let name = f.display_name();
        let output = run_filter(f, i, &model, &truth, config.seed, &config.snapshot_times)
            .map_err(|e| e.context(format!("filter `{name}`")))?;
        write_filter_files(&name, &output, &model, &truth, out, grid_filters > 1)?;
        outputs.push(NamedOutput { name, output });
    }

    let selection = MetricSelection {
        kde_l1: config.metrics.kde_l1,
        gain_l2: config.metrics.gain_l2,
        poincare: config.metrics.poincare,
    };
    let report = compute_metrics(&model, &outputs, &truth, config.metrics.reference.as_deref(), selection)
        .map_err(|e| e.context("metrics"))?;
    write_rmse_csv(&report, &truth, &out.join("rmse.csv"))?;
    write_run_gain_profile(&model, &outputs, &out.join("gain_profile.csv"))?;
    Ok(report)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

/// CSV `t, mu_.., sigma_ij (upper triangle), hhat_..` behind a `# dz_sha256=` line.
fn write_moment_csv(
    path: &Path,
    dz_hash: &str,
    times: &[f64],
    means: &[Vec<f64>],
    covs: &[DMatrix<f64>],
    h_hats: &[Vec<f64>],
) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(file, "# dz_sha256={dz_hash}")?;
    let d = means.first().map_or(0, Vec::len);
    let m = h_hats.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("mu_{i}")));
    for a in 1..=d {
        header.extend((a..=d).map(|b| format!("sigma_{a}{b}")));
    }
    header.extend((1..=m).map(|j| format!("hhat_{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for k in 0..times.len() {
        let mut row = vec![times[k].to_string()];
        row.extend(means[k].iter().map(f64::to_string));
        for a in 0..d {
            row.extend((a..d).map(|b| covs[k][(a, b)].to_string()));
        }
        row.extend(h_hats[k].iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_filter_files(
    name: &str,
    output: &FilterOutput,
    model: &DynamicsModel,
    truth: &TruthPath,
    out: &Path,
    name_densities: bool,
) -> Result<()> {
    let series = out.join(format!("timeseries_{name}.csv"));
    match output {
        FilterOutput::Particle(t) => {
            t.write_csv(&series)?;
            if !t.snapshots.is_empty() {
                t.write_snapshots_csv(&out.join(format!("snapshots_{name}.csv")))?;
            }
        }
        FilterOutput::Gaussian(t) => {
            let means = t.means();
            let covs: Vec<DMatrix<f64>> = t.beliefs.iter().map(|b| b.cov.clone()).collect();
            let h_hats: Vec<Vec<f64>> = means.iter().map(|m| model.observe_vec(m)).collect();
            write_moment_csv(&series, &truth.dz_hash(), &t.times, &means, &covs, &h_hats)?;
        }
        FilterOutput::Grid(t) => {
            let means: Vec<Vec<f64>> = t.means.iter().map(|m| vec![*m]).collect();
            let covs: Vec<DMatrix<f64>> = t.variances.iter().map(|v| DMatrix::from_element(1, 1, *v)).collect();
            write_moment_csv(&series, &truth.dz_hash(), &t.times, &means, &covs, &t.h_means)?;
            for (time, density) in &t.snapshots {
                let file = if name_densities {
                    format!("density_{name}_{time}.csv")
                } else {
                    format!("density_{time}.csv")
                };
                density.write_csv(&out.join(file))?;
            }
        }
    }
    Ok(())
}

fn write_rmse_csv(report: &MetricsReport, truth: &TruthPath, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["t".to_string()];
    header.extend(report.rmse_series.keys().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for (k, t) in truth.times.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(report.rmse_series.values().map(|s| s[k].to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// For scalar runs with a grid reference: final particle-filter gains next to
/// the direct solution on the terminal grid posterior.
fn write_run_gain_profile(model: &DynamicsModel, outputs: &[NamedOutput], path: &Path) -> Result<()> {
    let Some(grid) = outputs.iter().find_map(|o| match &o.output {
        FilterOutput::Grid(g) => Some(&g.terminal),
        _ => None,
    }) else {
        return Ok(());
    };
    let gains: Vec<(&str, &GainField)> = outputs
        .iter()
        .filter_map(|o| match &o.output {
            FilterOutput::Particle(t) => t.final_gain.as_ref().map(|g| (o.name.as_str(), g)),
            _ => None,
        })
        .collect();
    if gains.is_empty() || model.dim_state() != 1 {
        return Ok(());
    }
    let h = |x: f64| {
        let raw = model.observe_vec(&[x]);
        let mut white = vec![0.0; raw.len()];
        model.whiten(&raw, &mut white);
        white[0]
    };
    let dns = dns_gain_1d(grid, &h)?;
    let mut columns: Vec<(String, Vec<f64>)> = vec![("p".into(), dns.p.clone()), ("K_dns".into(), dns.k.clone())];
    for (name, g) in gains {
        let mut buf = vec![0.0; g.dim_state() * g.dim_obs()];
        let values = (0..dns.len())
            .map(|i| {
                g.evaluate_into(&[dns.x(i)], &mut buf);
                buf[0]
            })
            .collect();
        columns.push((format!("K_{name}"), values));
    }
    write_profile(path, &dns.nodes(), &columns, 1)
}

fn write_profile(path: &Path, xs: &[f64], columns: &[(String, Vec<f64>)], stride: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["x".to_string()];
    header.extend(columns.iter().map(|(n, _)| n.clone()));
    w.write_record(&header).map_err(csv_err)?;
    for i in (0..xs.len()).step_by(stride.max(1)) {
        let mut row = vec![xs[i].to_string()];
        row.extend(columns.iter().map(|(_, v)| v[i].to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Most rows written to the benchmark `gain_profile.csv`.
const PROFILE_ROWS: usize = 1200;

/// Static gain benchmark: direct solution, Galerkin (quadrature and particle
/// assembly) and constant gains for a fixed density, plus the spectral-gap
/// bound and optional Smoluchowski probes. Writes `gain_profile.csv`.
pub fn run_gain_bench(bench: &GainBenchConfig, seed: u64, out: &Path) -> Result<MetricsReport> {
    let mix = bench.density.to_mixture("gain_bench.density")?;
    let poly = Polynomial::new(bench.observation.clone());
    let h = |x: f64| poly.eval(x);
    let [lo, hi] = bench.dns_domain;
    let density = GridDensity1D::from_fn_spacing(lo, hi, bench.dns_dx, |x| mix.pdf(x))?;
    let dns = dns_gain_1d(&density, &h)?;

    let mut rng = stream_rng(seed, StreamId::new(Purpose::Sampling, 0));
    let particles: Vec<f64> = (0..bench.particles).map(|_| mix.sample(&mut rng)).collect();

    let mut report = MetricsReport::default();
    let mut columns: Vec<(String, Vec<f64>)> = vec![
        ("p".into(), dns.p.clone()),
        ("phi_dns".into(), dns.phi.clone()),
        ("K_dns".into(), dns.k.clone()),
    ];
    let profile = |g: &GainField| -> Vec<f64> { (0..dns.len()).map(|i| g.evaluate(&[dns.x(i)])[(0, 0)]).collect() };
    let [glo, ghi] = bench.galerkin_domain;
    for &cells in &bench.cells {
        let basis = GalerkinBasis1D::uniform(glo, ghi, cells)?;
        let (quad, _) = galerkin_gain(GalerkinSource::Quadrature(&density), &basis, &h)?;
        let (part, sol) = galerkin_gain(GalerkinSource::Particles(&particles), &basis, &h)?;
        report.gain_l2_err.insert(
            format!("galerkin_quadrature_L{cells}"),
            weighted_l2_error(&quad, 0, &dns),
        );
        report
            .gain_l2_err
            .insert(format!("galerkin_particle_L{cells}"), weighted_l2_error(&part, 0, &dns));
        report
            .galerkin_degenerate
            .insert(format!("particle_L{cells}"), sol.warning.is_some());
        columns.push((format!("K_galerkin_quadrature_L{cells}"), profile(&quad)));
        columns.push((format!("K_galerkin_particle_L{cells}"), profile(&part)));
    }
    let hs: Vec<f64> = particles.iter().map(|x| h(*x)).collect();
    let constant = constant_gain(&particles, 1, &hs, 1)?;
    report
        .gain_l2_err
        .insert("constant_particle".into(), weighted_l2_error(&constant, 0, &dns));
    columns.push(("K_constant_particle".into(), profile(&constant)));
    write_profile(
        &out.join("gain_profile.csv"),
        &dns.nodes(),
        &columns,
        dns.len().div_ceil(PROFILE_ROWS),
    )?;

    let lambda = spectral_gap_1d(&density)?;
    let bound = poincare_diagnostic(PoincareInput::Grid {
        density: &density,
        h: &h,
        gain: &dns.to_gain_field(),
        lambda: Some(lambda),
    })?;
    report.poincare.insert("dns".into(), bound);

    if let Some(s) = &bench.smoluchowski {
        let spec = SmoluchowskiSpec::from_mixture(&mix, s.horizon, s.dt, s.replicates)?;
        let hv = |x: &[f64], o: &mut [f64]| o[0] = poly.eval(x[0]);
        for &x in &s.probes {
            let est = smoluchowski_phi_mc(&spec, &hv, &[dns.h_hat], &[x], seed)?;
            report.smoluchowski.push(SmoluchowskiProbe {
                x,
                phi_mc: est.phi[0],
                std_err: est.std_err[0],
                phi_dns: dns.phi_at(x),
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_seeds_differ_and_are_stable() {
        let a: Vec<u64> = (0..4).map(|i| filter_seed(11, i)).collect();
        let b: Vec<u64> = (0..4).map(|i| filter_seed(11, i)).collect();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4);
        assert_ne!(filter_seed(11, 0), filter_seed(12, 0));
    }
}
