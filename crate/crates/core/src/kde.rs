//! Gaussian kernel density estimates of scalar ensembles.

use std::f64::consts::PI;

use crate::error::{invalid, Result};
use crate::numerics::pairwise_sum;
use crate::reference::GridDensity1D;

/// Kernel support in bandwidths; beyond it the kernel is treated as zero.
const KERNEL_RADIUS: f64 = 5.0;
/// Default node count of a binned estimate.
pub const DEFAULT_KDE_NODES: usize = 401;

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let w = pos - i as f64;
    if i + 1 < sorted.len() {
        (1.0 - w) * sorted[i] + w * sorted[i + 1]
    } else {
        sorted[i]
    }
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = pairwise_sum(samples) / n;
    let dev: Vec<f64> = samples.iter().map(|x| (x - mean).powi(2)).collect();
    (mean, (pairwise_sum(&dev) / (n - 1.0)).sqrt())
}

/// Silverman's rule `0.9 min(sigma, IQR / 1.34) N^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(invalid("samples", "need at least two samples for a bandwidth"));
    }
    let (_, std) = mean_std(samples);
    let s = sorted(samples);
    let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
    let spread = match iqr / 1.34 {
        r if r > 0.0 => std.min(r),
        _ => std,
    };
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(invalid("samples", "ensemble has zero spread"));
    }
    Ok(0.9 * spread * (samples.len() as f64).powf(-0.2))
}

/// Exact estimate at `x`.
pub fn kde_eval(samples: &[f64], bandwidth: f64, x: f64) -> f64 {
    let norm = 1.0 / (samples.len() as f64 * bandwidth * (2.0 * PI).sqrt());
    let terms: Vec<f64> = samples
        .iter()
        .map(|s| (-0.5 * ((x - s) / bandwidth).powi(2)).exp())
        .collect();
    norm * pairwise_sum(&terms)
}

/// Binned estimate on `nodes` points spanning `[lower, upper]`: samples are
/// linearly binned onto the nodes and the counts convolved with the kernel.
pub fn kde_grid(samples: &[f64], bandwidth: f64, lower: f64, upper: f64, nodes: usize) -> Result<GridDensity1D> {
    if nodes < 3 || !(upper > lower) {
        return Err(invalid("kde grid", "need at least 3 nodes and upper > lower"));
    }
    if !(bandwidth > 0.0) {
        return Err(invalid("bandwidth", "must be positive"));
    }
    let dx = (upper - lower) / (nodes - 1) as f64;
    let mut counts = vec![0.0; nodes];
    for &s in samples {
        let pos = (s - lower) / dx;
        if pos < 0.0 || pos > (nodes - 1) as f64 {
            continue;
        }
        let i = (pos.floor() as usize).min(nodes - 2);
        let w = pos - i as f64;
        counts[i] += 1.0 - w;
        counts[i + 1] += w;
    }
    let half = ((KERNEL_RADIUS * bandwidth / dx).ceil() as usize).max(1);
    let kernel: Vec<f64> = (0..=half)
        .map(|j| (-0.5 * (j as f64 * dx / bandwidth).powi(2)).exp())
        .collect();
    let values: Vec<f64> = (0..nodes)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(nodes - 1);
            (lo..=hi).map(|j| counts[j] * kernel[i.abs_diff(j)]).sum::<f64>()
        })
        .collect();
    GridDensity1D::from_values(lower, dx, values)
}

/// Binned Silverman estimate on `mean +- radius * std`, with at least
/// `min_nodes` nodes and spacing no larger than a third of the bandwidth.
pub fn kde_ensemble(samples: &[f64], radius: f64, min_nodes: usize) -> Result<GridDensity1D> {
    let bandwidth = silverman_bandwidth(samples)?;
    let (mean, std) = mean_std(samples);
    let (lower, upper) = (mean - radius * std, mean + radius * std);
    let needed = ((upper - lower) / (bandwidth / 3.0)).ceil() as usize + 1;
    kde_grid(samples, bandwidth, lower, upper, min_nodes.max(needed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::grid::gaussian_pdf;
    use crate::sde::{NoiseStream, Purpose, StreamId};

    fn normals(n: usize) -> Vec<f64> {
        let mut s = NoiseStream::new(5, StreamId::new(Purpose::Sampling, 0), 1);
        (0..n)
            .map(|_| {
                let mut z = [0.0];
                s.next_standard_normals(&mut z);
                z[0]
            })
            .collect()
    }

    #[test]
    fn silverman_on_known_sample() {
        let xs = [-1.0, 0.0, 1.0, 2.0];
        // std = sqrt(5/3); IQR = 1.5 with linear quantiles.
        let expected = 0.9 * (1.5f64 / 1.34).min((5.0f64 / 3.0).sqrt()) * 4f64.powf(-0.2);
        assert!((silverman_bandwidth(&xs).unwrap() - expected).abs() < 1e-15);
        assert!(silverman_bandwidth(&[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn binned_matches_exact_estimate() {
        let xs = normals(2000);
        let bw = silverman_bandwidth(&xs).unwrap();
        let g = kde_grid(&xs, bw, -6.0, 6.0, 1201).unwrap();
        for x in [-1.5, 0.0, 0.3, 2.0] {
            let exact = kde_eval(&xs, bw, x);
            assert!((g.interpolate(x) - exact).abs() < 2e-3 * exact.max(0.05), "{x}");
        }
    }

    #[test]
    fn ensemble_estimate_approximates_normal() {
        let xs = normals(20_000);
        let g = kde_ensemble(&xs, 6.0, DEFAULT_KDE_NODES).unwrap();
        let truth = GridDensity1D::from_fn(g.lower(), g.upper(), g.len(), |x| gaussian_pdf(x, 0.0, 1.0)).unwrap();
        assert!(g.l1_distance(&truth) < 0.03);
        assert!((g.mass() - 1.0).abs() < 1e-12);
    }
}
