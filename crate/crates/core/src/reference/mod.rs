//! Reference filters used as ground truth: Kalman–Bucy for linear-Gaussian
//! problems and a Kushner–Stratonovich grid solver for scalar ones.

pub mod grid;
pub mod kalman;

pub use grid::{
    fokker_planck_step, grid_moments, ks_grid_step_1d, ks_grid_step_substeps, max_stable_dt, run_ks_grid,
    GridDensity1D, GridMoments, GridTrace, KsGridOptions,
};
pub use kalman::{
    kalman_bucy_step, kalman_bucy_step_general, run_kalman_bucy, scalar_stationary_variance, GaussianBelief,
    GaussianTrace, Linearization,
};
