//! Mean-field consistency in the linear-Gaussian case: the deviation of the
//! ensemble moments from the Kalman–Bucy moments shrinks like `1/sqrt(N)`.

use fpf_core::fpf::{run_fpf, FpfOptions, GainStrategy};
use fpf_core::models::build_linear_model;
use fpf_core::reference::{run_kalman_bucy, Linearization};
use fpf_core::sde::{simulate_truth, TimeGrid};
use nalgebra::{DMatrix, DVector};

const RUNS: u64 = 50;
const DT: f64 = 2e-3;
const STEPS: usize = 250;

fn mean_deviation(n: usize) -> f64 {
    let model = build_linear_model(
        DMatrix::from_element(1, 1, -0.5),
        DMatrix::from_element(1, 1, 1.0),
        DVector::zeros(1),
        DMatrix::from_element(1, 1, 1.0),
    )
    .unwrap();
    let grid = TimeGrid::new(0.0, DT, STEPS).unwrap();
    let mut total = 0.0;
    for run in 0..RUNS {
        let truth = simulate_truth(&model, grid, 1000 + run).unwrap();
        let kb = run_kalman_bucy(&model, &truth, Linearization::Exact).unwrap();
        let trace = run_fpf(
            &model,
            &GainStrategy::KalmanFromEnsemble,
            &truth,
            n,
            5000 + run,
            &FpfOptions::default(),
        )
        .unwrap();
        let dev: f64 = trace
            .stats
            .iter()
            .zip(&kb.beliefs)
            .map(|(s, b)| (s.mean[0] - b.mean[0]).abs() + (s.cov[(0, 0)] - b.cov[(0, 0)]).abs())
            .sum::<f64>()
            / STEPS as f64;
        total += dev;
    }
    total / RUNS as f64
}

#[test]
fn moment_deviation_scales_like_inverse_root_n() {
    let coarse = mean_deviation(10_000);
    let fine = mean_deviation(40_000);
    let ratio = coarse / fine;
    assert!(
        (1.5..=2.8).contains(&ratio),
        "deviation {coarse:e} at N=1e4, {fine:e} at N=4e4, ratio {ratio}"
    );
}
