use fpf_core::fpf::{ensemble_stats, run_fpf, run_fpf_from, FpfOptions, GainStrategy, ParticleEnsemble};
use fpf_core::models::{scalar_polynomial_model, DynamicsModel, InitialDensitySpec, Polynomial};
use fpf_core::reference::{fokker_planck_step, GridDensity1D};
use fpf_core::sde::{simulate_truth, TimeGrid};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn gaussian(mean: f64, var: f64) -> InitialDensitySpec {
    InitialDensitySpec::gaussian(DVector::from_element(1, mean), DMatrix::from_element(1, 1, var)).unwrap()
}

fn bistable(obs: Vec<f64>) -> DynamicsModel {
    scalar_polynomial_model(
        Polynomial::new(vec![0.0, 1.0, 0.0, -1.0]),
        Polynomial::new(obs),
        gaussian(0.2, 0.5),
        1.0,
        1.0,
    )
    .unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    // Shifting h by a constant shifts dZ by c dt and leaves every particle path unchanged
    // up to the rounding of that shift.
    #[test]
    fn observation_offset_does_not_move_particles(c in -5.0f64..5.0, strategy in 0usize..4) {
        let strategy = match strategy {
            0 => GainStrategy::KalmanFromEnsemble,
            1 => GainStrategy::Constant,
            2 => GainStrategy::Galerkin { cells: 4 },
            _ => GainStrategy::DnsKde,
        };
        let grid = TimeGrid::new(0.0, 0.01, 40).unwrap();
        let base = bistable(vec![0.0, 1.0]);
        let shifted = bistable(vec![c, 1.0]);
        let t0 = simulate_truth(&base, grid, 21).unwrap();
        let t1 = simulate_truth(&shifted, grid, 21).unwrap();
        prop_assert_eq!(&t0.states, &t1.states);
        let opts = FpfOptions::default();
        let a = run_fpf(&base, &strategy, &t0, 300, 4, &opts).unwrap();
        let b = run_fpf(&shifted, &strategy, &t1, 300, 4, &opts).unwrap();
        let diff = max_abs_diff(&a.final_states, &b.final_states);
        prop_assert!(diff < 1e-9, "max particle difference {diff:e}");
    }

    #[test]
    fn permuting_particles_permutes_outputs(order in Just((0..40).collect::<Vec<usize>>()).prop_shuffle()) {
        let model = bistable(vec![0.0, 1.0]);
        let truth = simulate_truth(&model, TimeGrid::new(0.0, 0.01, 25).unwrap(), 8).unwrap();
        let mut a = ParticleEnsemble::sample(&model, 40, 6, 0.0).unwrap();
        let mut b = a.clone();
        b.permute(&order);
        let opts = FpfOptions::default();
        for strategy in [GainStrategy::Constant, GainStrategy::Galerkin { cells: 3 }] {
            let mut a = a.clone();
            let mut b = b.clone();
            run_fpf_from(&model, &strategy, &truth, &mut a, &opts).unwrap();
            run_fpf_from(&model, &strategy, &truth, &mut b, &opts).unwrap();
            for (i, &j) in order.iter().enumerate() {
                prop_assert!((b.particle(i)[0] - a.particle(j)[0]).abs() < 1e-12);
            }
        }
        a.permute(&order);
        prop_assert_eq!(a.states(), b.states());
    }
}

#[test]
fn zero_gain_ensemble_follows_the_prior_law() {
    let model = bistable(vec![0.0, 0.0, 1.0]);
    let dt = 1e-3;
    let steps = 500;
    let truth = simulate_truth(&model, TimeGrid::new(0.0, dt, steps).unwrap(), 2).unwrap();
    let n = 20_000;
    let trace = run_fpf(&model, &GainStrategy::Zero, &truth, n, 9, &FpfOptions::default()).unwrap();

    let drift = |x: f64| x - x * x * x;
    let mut density =
        GridDensity1D::from_fn_spacing(-4.0, 4.0, 0.01, |x| (-(x - 0.2f64).powi(2) / (2.0 * 0.5)).exp()).unwrap();
    density.normalize().unwrap();
    let substeps = 20;
    for _ in 0..steps * substeps {
        density = fokker_planck_step(&density, &drift, dt / substeps as f64).unwrap();
    }

    let xs = &trace.final_states;
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
    let se_mean = (var / n as f64).sqrt();
    let se_var = ((m4 - var * var) / n as f64).sqrt();
    assert!(
        (mean - density.mean()).abs() <= 3.0 * se_mean,
        "mean {mean} vs {} (se {se_mean})",
        density.mean()
    );
    assert!(
        (var - density.variance()).abs() <= 3.0 * se_var,
        "variance {var} vs {} (se {se_var})",
        density.variance()
    );
}

#[test]
fn ensemble_covariance_is_symmetric_psd() {
    let model = bistable(vec![0.0, 1.0]);
    let e = ParticleEnsemble::sample(&model, 500, 3, 0.0).unwrap();
    let s = ensemble_stats(&e, &model).unwrap();
    assert_eq!(s.cov.clone(), s.cov.transpose());
    assert!(s.cov.symmetric_eigenvalues().iter().all(|v| *v >= 0.0));
}
