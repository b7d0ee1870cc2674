//! Direct numerical solution of the scalar Poisson equation by quadrature.

use std::path::Path;

use super::GainField;
use crate::error::{Error, Result};
use crate::numerics::{cumulative_trapezoid, pairwise_sum, pairwise_sum_by, trapezoid};
use crate::reference::GridDensity1D;

/// Density floor applied before dividing by `p`.
const DENSITY_FLOOR: f64 = 1e-300;

/// Potential `phi`, gain `K = phi'` and the density they were computed for,
/// all on the nodes of one uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonSolution1D {
    pub lower: f64,
    pub dx: f64,
    pub p: Vec<f64>,
    pub phi: Vec<f64>,
    pub k: Vec<f64>,
    pub h_hat: f64,
}

impl PoissonSolution1D {
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    pub fn x(&self, i: usize) -> f64 {
        self.lower + i as f64 * self.dx
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.x(i)).collect()
    }

    /// Linear interpolation of `phi`, clamped at the ends.
    pub fn phi_at(&self, x: f64) -> f64 {
        interpolate(&self.phi, self.lower, self.dx, x)
    }

    pub fn gain_at(&self, x: f64) -> f64 {
        interpolate(&self.k, self.lower, self.dx, x)
    }

    /// The gain as a tabulated single-channel field.
    pub fn to_gain_field(&self) -> GainField {
        GainField::Grid1d {
            lower: self.lower,
            dx: self.dx,
            values: vec![self.k.clone()],
        }
    }

    /// CSV with columns `x, phi, K`.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "phi", "K"])?;
        for i in 0..self.len() {
            w.write_record([self.x(i).to_string(), self.phi[i].to_string(), self.k[i].to_string()])?;
        }
        w.flush()
    }
}

fn interpolate(values: &[f64], lower: f64, dx: f64, x: f64) -> f64 {
    let n = values.len();
    let s = ((x - lower) / dx).clamp(0.0, (n - 1) as f64);
    let i = (s.floor() as usize).min(n - 2);
    let w = s - i as f64;
    (1.0 - w) * values[i] + w * values[i + 1]
}

/// Solves `(p K)' = -(h - hhat) p` on the grid by cumulative trapezoidal
/// integration, `K(x) = -(1/p) int_{-inf}^x (h - hhat) p`.
///
/// Left of the median the integral runs from the lower end; right of it the
/// equivalent form `(1/p) int_x^{inf} (h - hhat) p` is used, so each tail
/// divides a small integral by a small density instead of a cancellation
/// residue. `phi` integrates `K` and is centred so that `sum phi p dx = 0`.
pub fn dns_gain_1d(density: &GridDensity1D, h: &dyn Fn(f64) -> f64) -> Result<PoissonSolution1D> {
    let n = density.len();
    let dx = density.dx();
    let p = density.values();
    let mass = trapezoid(p, dx);
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::ZeroMass);
    }
    let hs: Vec<f64> = (0..n).map(|i| h(density.x(i))).collect();
    let hp: Vec<f64> = (0..n).map(|i| hs[i] * p[i]).collect();
    let h_hat = trapezoid(&hp, dx) / mass;
    let f: Vec<f64> = (0..n).map(|i| (hs[i] - h_hat) * p[i]).collect();

    let left = cumulative_trapezoid(&f, dx);
    let reversed: Vec<f64> = f.iter().rev().copied().collect();
    let mut right = cumulative_trapezoid(&reversed, dx);
    right.reverse();

    let cumulative_mass = cumulative_trapezoid(p, dx);
    let median = cumulative_mass.partition_point(|m| *m < 0.5 * mass);
    let k: Vec<f64> = (0..n)
        .map(|i| {
            let pi = p[i].max(DENSITY_FLOOR);
            if i < median {
                -left[i] / pi
            } else {
                right[i] / pi
            }
        })
        .collect();

    let mut phi = cumulative_trapezoid(&k, dx);
    let centre = pairwise_sum_by(n, |i| phi[i] * p[i]) / pairwise_sum(p);
    phi.iter_mut().for_each(|v| *v -= centre);

    Ok(PoissonSolution1D {
        lower: density.lower(),
        dx,
        p: p.to_vec(),
        phi,
        k,
        h_hat,
    })
}

/// `sqrt(sum_i |K(x_i) - K_dns(x_i)|^2 p_i dx)` for channel `channel` of `field`.
pub fn weighted_l2_error(field: &GainField, channel: usize, reference: &PoissonSolution1D) -> f64 {
    let mut buf = vec![0.0; field.dim_state() * field.dim_obs()];
    let terms: Vec<f64> = (0..reference.len())
        .map(|i| {
            field.evaluate_into(&[reference.x(i)], &mut buf);
            (buf[channel] - reference.k[i]).powi(2) * reference.p[i]
        })
        .collect();
    (pairwise_sum(&terms) * reference.dx).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::MixtureDensity1D;
    use crate::reference::grid::gaussian_pdf;
    use proptest::prelude::*;

    fn normal_grid(dx: f64) -> GridDensity1D {
        GridDensity1D::from_fn_spacing(-8.0, 8.0, dx, |x| gaussian_pdf(x, 0.0, 1.0)).unwrap()
    }

    #[test]
    fn linear_observation_gives_unit_gain() {
        let sol = dns_gain_1d(&normal_grid(1e-3), &|x| x).unwrap();
        for i in 0..sol.len() {
            if sol.x(i).abs() <= 3.0 {
                assert!((sol.k[i] - 1.0).abs() < 1e-6, "K({}) = {}", sol.x(i), sol.k[i]);
            }
        }
    }

    #[test]
    fn constant_observation_gives_zero_gain() {
        let sol = dns_gain_1d(&normal_grid(1e-2), &|_| 3.5).unwrap();
        assert!(sol.k.iter().all(|k| k.abs() < 1e-12));
    }

    #[test]
    fn potential_is_centred() {
        let mix = MixtureDensity1D::default_benchmark();
        let g = GridDensity1D::from_fn_spacing(-6.0, 6.0, 1e-3, |x| mix.pdf(x)).unwrap();
        let sol = dns_gain_1d(&g, &|x| x * x).unwrap();
        let centred = pairwise_sum_by(sol.len(), |i| sol.phi[i] * sol.p[i]) * sol.dx;
        assert!(centred.abs() < 1e-8);
    }

    #[test]
    fn mixture_gain_is_grid_converged() {
        let mix = MixtureDensity1D::default_benchmark();
        let at_zero = |dx: f64| {
            let g = GridDensity1D::from_fn_spacing(-6.0, 6.0, dx, |x| mix.pdf(x)).unwrap();
            dns_gain_1d(&g, &|x| x * x).unwrap().gain_at(0.0)
        };
        let coarse = at_zero(1e-3);
        let fine = at_zero(1e-4);
        assert!((coarse - fine).abs() < 1e-4, "{coarse} vs {fine}");
    }

    #[test]
    fn divergence_form_residual_is_second_order() {
        let mix = MixtureDensity1D::default_benchmark();
        let residual = |dx: f64| {
            let g = GridDensity1D::from_fn_spacing(-5.0, 5.0, dx, |x| mix.pdf(x)).unwrap();
            let sol = dns_gain_1d(&g, &|x| x * x).unwrap();
            (1..sol.len() - 1)
                .map(|i| {
                    let flux = (sol.p[i + 1] * sol.k[i + 1] - sol.p[i - 1] * sol.k[i - 1]) / (2.0 * dx);
                    let x = sol.x(i);
                    (flux + (x * x - sol.h_hat) * sol.p[i]).abs()
                })
                .fold(0.0, f64::max)
        };
        let r1 = residual(0.04);
        let r2 = residual(0.02);
        let slope = (r1 / r2).log2();
        assert!(slope >= 1.8, "residual slope {slope} ({r1:e}, {r2:e})");
    }

    #[test]
    fn vanishing_tails_stay_finite() {
        // Density exactly zero on part of the grid.
        let g = GridDensity1D::from_fn(-3.0, 3.0, 601, |x| (1.0 - x.abs()).max(0.0)).unwrap();
        let sol = dns_gain_1d(&g, &|x| x * x * x).unwrap();
        assert!(sol.k.iter().chain(&sol.phi).all(|v| v.is_finite()));
    }

    #[test]
    fn weighted_error_of_exact_field_is_zero() {
        let sol = dns_gain_1d(&normal_grid(1e-2), &|x| x).unwrap();
        assert!(weighted_l2_error(&sol.to_gain_field(), 0, &sol) < 1e-12);
    }

    proptest! {
        #[test]
        fn gain_is_shift_equivariant(c in -3.0f64..3.0) {
            let mix = MixtureDensity1D::default_benchmark();
            let dx = 5e-3;
            let g0 = GridDensity1D::from_fn_spacing(-6.0, 6.0, dx, |x| mix.pdf(x)).unwrap();
            let g1 = GridDensity1D::from_fn_spacing(-6.0 + c, 6.0 + c, dx, |x| mix.pdf(x - c)).unwrap();
            let s0 = dns_gain_1d(&g0, &|x| x * x).unwrap();
            let s1 = dns_gain_1d(&g1, &|x| (x - c) * (x - c)).unwrap();
            for x in [-1.3, 0.0, 0.4, 2.2] {
                prop_assert!((s0.gain_at(x) - s1.gain_at(x + c)).abs() < 1e-8);
            }
        }

        #[test]
        fn offset_in_h_does_not_change_gain(c in -10.0f64..10.0) {
            let g = normal_grid(2e-2);
            let a = dns_gain_1d(&g, &|x| x.sin()).unwrap();
            let b = dns_gain_1d(&g, &|x| x.sin() + c).unwrap();
            for (ka, kb) in a.k.iter().zip(&b.k) {
                prop_assert!((ka - kb).abs() < 1e-9 * (1.0 + ka.abs()));
            }
        }
    }
}
