//! GP-based initial value problem solvers.
//!
//! Every solver treats each state dimension as an independent scalar GP
//! sharing one kernel, so a single [`LinearPredictor`] per conditioning
//! layout serves all dimensions. The initial state is always a noiseless
//! value observation and is reproduced exactly in the output.

mod explicit;
mod gradient;
mod implicit;
mod linear;
mod skilling;

pub use explicit::explicit_solve;
pub use gradient::gradient_match_solve;
pub use implicit::{implicit_moment_solve, implicit_sample};
pub use linear::{linear_gp_on_grid, linear_gp_solve, BoundaryCondition, LinearGpSolution};
pub use skilling::skilling_solve;

use nalgebra::{DMatrix, DVector};

use crate::error::{OdexError, Result};
use crate::gp::{KernelConfig, LinearPredictor, Site};
use crate::models::{eval_f, eval_second_derivative, DerivativePolicy, OdeSystem, TimeGrid, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub grid: TimeGrid,
    /// Window length `M`.
    pub window: usize,
    /// Ensemble size `S`.
    pub samples: usize,
    /// Fixed-point iteration budget `I`.
    pub max_iterations: usize,
    /// Fixed-point tolerance on the max-norm change of the window.
    pub tolerance: f64,
    /// Add `ẍ` observations to every conditioning set.
    pub use_second_derivatives: bool,
    pub kernel: KernelConfig,
    pub seed: u64,
    pub derivative_policy: DerivativePolicy,
    /// Run ensemble members on the rayon pool (needs the `parallel` feature).
    pub parallel: bool,
    /// Skilling only: also condition on the sampled values as noisy
    /// observations of the solution.
    pub skilling_retain_values: bool,
}

impl SolverConfig {
    pub fn new(grid: TimeGrid) -> Self {
        SolverConfig {
            grid,
            window: 5,
            samples: 20,
            max_iterations: 50,
            tolerance: 1e-8,
            use_second_derivatives: false,
            kernel: KernelConfig::default(),
            seed: 0,
            derivative_policy: DerivativePolicy::AllowFiniteDifference,
            parallel: true,
            skilling_retain_values: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(OdexError::invalid("window", "must be >= 1"));
        }
        if self.samples == 0 {
            return Err(OdexError::invalid("samples", "must be >= 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(OdexError::invalid("tolerance", format!("must be > 0, got {}", self.tolerance)));
        }
        self.kernel.validate()
    }

    fn validate_fixed_point(&self) -> Result<()> {
        self.validate()?;
        if self.max_iterations == 0 {
            return Err(OdexError::invalid("max_iterations", "must be >= 1"));
        }
        Ok(())
    }
}

/// Per-run instrumentation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolverStats {
    /// Largest number of observations in any conditioning set.
    pub max_conditioning_size: usize,
    /// Updates each window needed to reach its fixed point (deterministic solvers).
    pub window_iterations: Vec<usize>,
    /// Gradient matching: objective value before and after each update, per window.
    pub objective_history: Vec<Vec<f64>>,
    /// Skilling: derivative observation variances of the first sweep.
    pub derivative_noise: Vec<f64>,
}

impl SolverStats {
    fn merge(&mut self, other: &SolverStats) {
        self.max_conditioning_size = self.max_conditioning_size.max(other.max_conditioning_size);
    }
}

/// Distribution over solution trajectories on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionEnsemble {
    pub grid: TimeGrid,
    /// Sampled trajectories, each `N × d`. Empty for moment-based solvers.
    pub samples: Vec<DMatrix<f64>>,
    pub mean: DMatrix<f64>,
    pub std: DMatrix<f64>,
    /// Number of vector field evaluations over the whole run.
    pub f_evals: usize,
    pub stats: SolverStats,
}

impl SolutionEnsemble {
    /// Sample statistics of `samples`; row 0 is pinned to `x1`.
    pub fn from_samples(grid: TimeGrid, x1: &DVector<f64>, samples: Vec<DMatrix<f64>>) -> Self {
        let n = grid.count;
        let d = x1.len();
        let s = samples.len();
        let mut mean = DMatrix::zeros(n, d);
        let mut std = DMatrix::zeros(n, d);
        for r in 0..n {
            for c in 0..d {
                let m = samples.iter().map(|x| x[(r, c)]).sum::<f64>() / s as f64;
                let var = if s > 1 {
                    samples.iter().map(|x| (x[(r, c)] - m).powi(2)).sum::<f64>() / (s - 1) as f64
                } else {
                    0.0
                };
                mean[(r, c)] = m;
                std[(r, c)] = var.sqrt();
            }
        }
        mean.set_row(0, &x1.transpose());
        std.row_mut(0).fill(0.0);
        SolutionEnsemble { grid, samples, mean, std, f_evals: 0, stats: SolverStats::default() }
    }

    pub fn from_moments(grid: TimeGrid, mean: DMatrix<f64>, std: DMatrix<f64>) -> Self {
        SolutionEnsemble { grid, samples: Vec::new(), mean, std, f_evals: 0, stats: SolverStats::default() }
    }

    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn mean_trajectory(&self) -> Trajectory {
        Trajectory { grid: self.grid, states: self.mean.clone() }
    }

    pub fn errors(&self, reference: &Trajectory) -> Result<ErrorSummary> {
        ErrorSummary::between(&self.mean, &reference.states)
    }
}

/// RMSE and max-abs error of an estimate against a reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorSummary {
    pub rmse: f64,
    pub max_abs: f64,
}

impl ErrorSummary {
    pub fn between(estimate: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<Self> {
        if estimate.shape() != reference.shape() {
            return Err(OdexError::DimensionMismatch { expected: reference.len(), found: estimate.len() });
        }
        let diff = estimate - reference;
        let rmse = (diff.iter().map(|e| e * e).sum::<f64>() / diff.len() as f64).sqrt();
        Ok(ErrorSummary { rmse, max_abs: diff.amax() })
    }

    /// Max-abs error restricted to one state component.
    pub fn component_max_abs(estimate: &DMatrix<f64>, reference: &DMatrix<f64>, c: usize) -> f64 {
        (estimate.column(c) - reference.column(c)).amax()
    }
}

/// Observations of all state dimensions at shared sites.
#[derive(Clone, Debug, Default)]
pub(crate) struct Conditioning {
    pub sites: Vec<Site>,
    pub noise: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

impl Conditioning {
    pub fn push(&mut self, site: Site, noise: f64, value: DVector<f64>) {
        self.sites.push(site);
        self.noise.push(noise);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    /// `n × d` matrix of observed values.
    pub fn value_matrix(&self, d: usize) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.values.len(), d);
        for (r, v) in self.values.iter().enumerate() {
            y.set_row(r, &v.transpose());
        }
        y
    }

    pub fn predictor(&self, kernel: &KernelConfig, queries: &[Site]) -> Result<LinearPredictor> {
        LinearPredictor::new(kernel, &self.sites, &self.noise, queries)
    }
}

/// Vector field plus optional second derivative at one state.
#[derive(Clone, Debug)]
pub(crate) struct Slopes {
    pub first: DVector<f64>,
    pub second: Option<DVector<f64>>,
}

impl Slopes {
    pub fn eval(sys: &dyn OdeSystem, t: f64, x: &DVector<f64>, cfg: &SolverConfig) -> Result<Self> {
        let first = eval_f(sys, t, x)?;
        let second = if cfg.use_second_derivatives {
            Some(eval_second_derivative(sys, t, x, cfg.derivative_policy)?)
        } else {
            None
        };
        Ok(Slopes { first, second })
    }

    pub fn push_into(&self, cond: &mut Conditioning, t: f64, noise: f64) {
        cond.push(Site::deriv(t), noise, self.first.clone());
        if let Some(s) = &self.second {
            cond.push(Site::second(t), noise, s.clone());
        }
    }
}

pub(crate) fn check_inputs(sys: &dyn OdeSystem, x1: &DVector<f64>) -> Result<()> {
    if x1.len() != sys.dim() {
        return Err(OdexError::DimensionMismatch { expected: sys.dim(), found: x1.len() });
    }
    Ok(())
}

/// Ensemble of `N = 1` grids: nothing to integrate.
pub(crate) fn trivial_ensemble(grid: TimeGrid, x1: &DVector<f64>) -> SolutionEnsemble {
    let traj = DMatrix::from_row_slice(1, x1.len(), x1.as_slice());
    SolutionEnsemble::from_samples(grid, x1, vec![traj])
}

/// Draws `mean + std·z` per state dimension from one shared marginal variance.
pub(crate) fn draw_scalar<R: rand::Rng + ?Sized>(mean: &DVector<f64>, variance: f64, rng: &mut R) -> DVector<f64> {
    let z = crate::gp::standard_normal_vector(mean.len(), rng);
    mean + z * variance.max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_statistics() {
        let grid = TimeGrid::new(0.0, 1.0, 2).unwrap();
        let x1 = DVector::from_vec(vec![1.0]);
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 4.0]);
        let e = SolutionEnsemble::from_samples(grid, &x1, vec![a, b]);
        assert_eq!(e.mean[(1, 0)], 3.0);
        assert!((e.std[(1, 0)] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(e.std[(0, 0)], 0.0);
    }

    #[test]
    fn error_summary() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, -3.0]);
        let b = DMatrix::zeros(2, 2);
        let s = ErrorSummary::between(&a, &b).unwrap();
        assert_eq!(s.max_abs, 3.0);
        assert!((s.rmse - (10.0f64 / 4.0).sqrt()).abs() < 1e-15);
        assert!(ErrorSummary::between(&a, &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn config_validation() {
        let grid = TimeGrid::new(0.0, 0.1, 5).unwrap();
        let mut cfg = SolverConfig::new(grid);
        assert!(cfg.validate().is_ok());
        cfg.window = 0;
        assert!(cfg.validate().is_err());
        cfg.window = 3;
        cfg.max_iterations = 0;
        assert!(cfg.validate().is_ok());
        assert!(cfg.validate_fixed_point().is_err());
        cfg.tolerance = 0.0;
        assert!(cfg.validate().is_err());
    }
}
