//! Galerkin approximation of the scalar gain with indicator basis functions.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};

use super::GainField;
use crate::error::{dimension, invalid, Error, Result};
use crate::numerics::pairwise_sum_by;
use crate::reference::GridDensity1D;

/// Relative pivot size below which the Galerkin matrix counts as singular.
const PIVOT_TOLERANCE: f64 = 1e-12;
/// Ridge scale relative to `trace(A) / L`.
const RIDGE_SCALE: f64 = 1e-8;

/// Test functions paired with the cell indicators.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TestFunctions {
    /// `psi_k(x) = |x - a_k|`, `k = 1..L`, with `sign(0) = +1` in the gradient.
    AbsDistance,
    /// `psi_1(x) = x`; only for a single cell. Reproduces the constant gain.
    Coordinate,
}

/// Partition `a_0 < ... < a_L` with indicators of `[a_{l-1}, a_l)` as the
/// gain basis.
#[derive(Clone, Debug, PartialEq)]
pub struct GalerkinBasis1D {
    nodes: Vec<f64>,
    tests: TestFunctions,
}

impl GalerkinBasis1D {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        Self::with_tests(nodes, TestFunctions::AbsDistance)
    }

    pub fn with_tests(nodes: Vec<f64>, tests: TestFunctions) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(invalid("partition", "need at least two nodes"));
        }
        if nodes.iter().any(|a| !a.is_finite()) || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("partition", "nodes must be finite and strictly increasing"));
        }
        if tests == TestFunctions::Coordinate && nodes.len() != 2 {
            return Err(invalid("partition", "coordinate test functions need exactly one cell"));
        }
        Ok(Self { nodes, tests })
    }

    /// `cells` equal cells on `[lower, upper]`.
    pub fn uniform(lower: f64, upper: f64, cells: usize) -> Result<Self> {
        if cells == 0 {
            return Err(invalid("cells", "need at least one cell"));
        }
        let h = (upper - lower) / cells as f64;
        let mut nodes: Vec<f64> = (0..cells).map(|l| lower + l as f64 * h).collect();
        nodes.push(upper);
        Self::new(nodes)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn cells(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn tests(&self) -> TestFunctions {
        self.tests
    }

    fn psi(&self, k: usize, x: f64) -> f64 {
        match self.tests {
            TestFunctions::AbsDistance => (x - self.nodes[k + 1]).abs(),
            TestFunctions::Coordinate => x,
        }
    }

    fn grad_psi(&self, k: usize, x: f64) -> f64 {
        match self.tests {
            TestFunctions::AbsDistance => {
                if x >= self.nodes[k + 1] {
                    1.0
                } else {
                    -1.0
                }
            }
            TestFunctions::Coordinate => 1.0,
        }
    }
}

/// Cell containing `x`, or `None` outside `[a_0, a_L)`.
pub(crate) fn cell_index(nodes: &[f64], x: f64) -> Option<usize> {
    let above = nodes.partition_point(|a| *a <= x);
    (above >= 1 && above < nodes.len()).then(|| above - 1)
}

/// Where the expectations in the weak form come from.
#[derive(Clone, Copy, Debug)]
pub enum GalerkinSource<'a> {
    /// Equal-weight particles (scalar states).
    Particles(&'a [f64]),
    /// Quadrature against a grid density.
    Quadrature(&'a GridDensity1D),
}

/// The linear system `A kappa = b` together with the `hhat` used for `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct GalerkinSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub h_hat: f64,
}

/// Weighted points for grid quadrature: every grid interval is split at the
/// partition nodes and each piece contributes its midpoint, weighted by the
/// piece length times the linearly interpolated density.
fn quadrature_points(density: &GridDensity1D, partition: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = density.values();
    let mut xs = Vec::with_capacity(density.len() + partition.len());
    let mut ws = Vec::with_capacity(density.len() + partition.len());
    for i in 0..density.len() - 1 {
        let (x0, x1) = (density.x(i), density.x(i + 1));
        let mut cuts = vec![x0];
        cuts.extend(partition.iter().copied().filter(|a| *a > x0 && *a < x1));
        cuts.push(x1);
        for w in cuts.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let t = (mid - x0) / (x1 - x0);
            xs.push(mid);
            ws.push((w[1] - w[0]) * ((1.0 - t) * p[i] + t * p[i + 1]));
        }
    }
    let total = crate::numerics::pairwise_sum(&ws);
    ws.iter_mut().for_each(|w| *w /= total);
    (xs, ws)
}

/// `A_kl = sum_i w_i chi_l(x_i) psi_k'(x_i)` and `b_k = sum_i w_i r_i psi_k(x_i)`
/// for residuals `r_i = h(x_i) - hhat`.
fn assemble_weighted(
    xs: &[f64],
    weights: Option<&[f64]>,
    residuals: &[f64],
    basis: &GalerkinBasis1D,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = xs.len();
    let cells = basis.cells();
    let cell_of: Vec<Option<usize>> = xs.iter().map(|&x| cell_index(&basis.nodes, x)).collect();
    let w = |i: usize| weights.map_or(1.0 / n as f64, |w| w[i]);
    let a = DMatrix::from_fn(cells, cells, |k, l| {
        pairwise_sum_by(n, |i| {
            if cell_of[i] == Some(l) {
                w(i) * basis.grad_psi(k, xs[i])
            } else {
                0.0
            }
        })
    });
    let b = DVector::from_fn(cells, |k, _| {
        pairwise_sum_by(n, |i| w(i) * residuals[i] * basis.psi(k, xs[i]))
    });
    (a, b)
}

/// Assembles the Galerkin system for one observation channel `h`.
///
/// In particle mode `hhat` is the ensemble mean; in quadrature mode it is
/// the quadrature mean of `h` under the grid density.
pub fn assemble_galerkin(
    source: GalerkinSource<'_>,
    basis: &GalerkinBasis1D,
    h: &dyn Fn(f64) -> f64,
) -> Result<GalerkinSystem> {
    match source {
        GalerkinSource::Particles(xs) => {
            if xs.is_empty() {
                return Err(Error::TooFewParticles { needed: 1, got: 0 });
            }
            let hs: Vec<f64> = xs.iter().map(|&x| h(x)).collect();
            let h_hat = crate::numerics::pairwise_sum(&hs) / xs.len() as f64;
            let residuals: Vec<f64> = hs.iter().map(|v| v - h_hat).collect();
            let (a, b) = assemble_weighted(xs, None, &residuals, basis);
            Ok(GalerkinSystem { a, b, h_hat })
        }
        GalerkinSource::Quadrature(density) => {
            let (xs, ws) = quadrature_points(density, &basis.nodes);
            let hs: Vec<f64> = xs.iter().map(|&x| h(x)).collect();
            let h_hat = pairwise_sum_by(xs.len(), |i| ws[i] * hs[i]);
            let residuals: Vec<f64> = hs.iter().map(|v| v - h_hat).collect();
            let (a, b) = assemble_weighted(&xs, Some(&ws), &residuals, basis);
            Ok(GalerkinSystem { a, b, h_hat })
        }
    }
}

/// Particle-mode assembly from precomputed residuals `h(X^i) - hhat`.
pub(crate) fn assemble_particle_residuals(
    xs: &[f64],
    residuals: &[f64],
    basis: &GalerkinBasis1D,
) -> (DMatrix<f64>, DVector<f64>) {
    assemble_weighted(xs, None, residuals, basis)
}

/// Details of a ridge-regularized solve.
#[derive(Clone, Debug, PartialEq)]
pub struct DegeneracyWarning {
    /// Zero-based indices of cells whose column of `A` vanishes.
    pub empty_cells: Vec<usize>,
    pub delta: f64,
}

/// Coefficients for one channel, with the warning if the fallback was used.
#[derive(Clone, Debug, PartialEq)]
pub struct GalerkinSolution {
    pub kappa: DVector<f64>,
    pub warning: Option<DegeneracyWarning>,
}

/// Solves `A kappa = b`. A singular `A` is regularized to `(A + delta I)`
/// with `delta = 1e-8 trace(A) / L`; coefficients of empty cells are then
/// set to zero because the ridge alone leaves them at `b_l / delta`.
pub fn solve_galerkin(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<GalerkinSolution> {
    let cells = a.nrows();
    if a.ncols() != cells || b.len() != cells || cells == 0 {
        return Err(dimension(
            "A",
            format!("expected square {0}x{0} system with b of length {0}", b.len()),
        ));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(invalid("A", "Galerkin system has non-finite entries"));
    }
    let norm = a.norm();
    if norm == 0.0 {
        return Err(Error::AllCellsEmpty);
    }
    let lu = a.clone().lu();
    let min_pivot = lu.u().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min_pivot > PIVOT_TOLERANCE * norm {
        if let Some(kappa) = lu.solve(b) {
            return Ok(GalerkinSolution { kappa, warning: None });
        }
    }
    let empty_cells: Vec<usize> = (0..cells)
        .filter(|&l| a.column(l).norm() <= PIVOT_TOLERANCE * norm)
        .collect();
    let delta = RIDGE_SCALE * a.trace() / cells as f64;
    let ridge = a + DMatrix::identity(cells, cells) * delta;
    let mut kappa = ridge
        .lu()
        .solve(b)
        .ok_or_else(|| invalid("A", "regularized Galerkin system is still singular"))?;
    for &l in &empty_cells {
        kappa[l] = 0.0;
    }
    debug!(
        "Galerkin matrix is singular; ridge delta {delta:e}, empty cells {:?}",
        empty_cells.iter().map(|l| l + 1).collect::<Vec<_>>()
    );
    Ok(GalerkinSolution {
        kappa,
        warning: Some(DegeneracyWarning { empty_cells, delta }),
    })
}

/// Assembles and solves one channel, returning the gain field and any warning.
pub fn galerkin_gain(
    source: GalerkinSource<'_>,
    basis: &GalerkinBasis1D,
    h: &dyn Fn(f64) -> f64,
) -> Result<(GainField, GalerkinSolution)> {
    let system = assemble_galerkin(source, basis, h)?;
    let solution = solve_galerkin(&system.a, &system.b)?;
    if let Some(w) = &solution.warning {
        warn!(
            "Galerkin matrix is singular; ridge delta {:e}, empty cells {:?}",
            w.delta,
            w.empty_cells.iter().map(|l| l + 1).collect::<Vec<_>>()
        );
    }
    let field = GainField::Galerkin1d {
        nodes: basis.nodes.clone(),
        kappa: vec![solution.kappa.iter().copied().collect()],
    };
    Ok((field, solution))
}
