use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use odex_core::gp::KernelConfig;
use odex_core::models::{forced_oscillator, linear_system, van_der_pol, Counted, Forcing, OdeSystem, TimeGrid, Trajectory};
use odex_core::reference::{rk45_solve, RkConfig};
use odex_core::solvers::{
    explicit_solve, gradient_match_solve, implicit_moment_solve, implicit_sample, linear_gp_on_grid, skilling_solve, ErrorSummary,
    SolverConfig,
};
use odex_core::OdexError;

use crate::config::{ExperimentConfig, Method, Reference, SystemKind};
use crate::error::CliError;

/// Everything `run` produces for one configuration.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub grid: TimeGrid,
    pub mean: DMatrix<f64>,
    pub std: DMatrix<f64>,
    /// Reference label (`exact` or `rk45`) and trajectory.
    pub reference: Option<(&'static str, Trajectory)>,
    pub errors: Option<ErrorSummary>,
    pub f_evals: usize,
    pub wall_time: Duration,
}

pub fn build_system(cfg: &ExperimentConfig) -> Result<Box<dyn OdeSystem>, CliError> {
    Ok(match cfg.system {
        SystemKind::ForcedOscillator => Box::new(forced_oscillator(cfg.theta).map_err(|e| CliError::config("theta", e.to_string()))?),
        SystemKind::VanDerPol => Box::new(van_der_pol(cfg.theta)),
        SystemKind::Linear => {
            let l = cfg.matrix.clone().ok_or_else(|| CliError::config("matrix", "required for linear systems"))?;
            let d = l.nrows();
            let forcing = match &cfg.forcing {
                Some(v) if v.len() != d => return Err(CliError::config("forcing", format!("expected {d} entries, got {}", v.len()))),
                Some(v) => Forcing::Constant(DVector::from_column_slice(v)),
                None => Forcing::zero(d),
            };
            let sys = linear_system(l, forcing)?;
            match cfg.x0_vector() {
                Some(x0) => Box::new(sys.with_initial_state(cfg.t_start, x0).map_err(|e| CliError::config("x0", e.to_string()))?),
                None => Box::new(sys),
            }
        }
    })
}

pub fn initial_state(cfg: &ExperimentConfig, sys: &dyn OdeSystem) -> Result<DVector<f64>, CliError> {
    let x0 = match cfg.x0_vector() {
        Some(x) => x,
        None => sys.default_initial_state().ok_or_else(|| CliError::config("x0", "no default initial state for this system"))?,
    };
    if x0.len() != sys.dim() {
        return Err(CliError::config("x0", format!("expected {} entries, got {}", sys.dim(), x0.len())));
    }
    Ok(x0)
}

pub fn grid(cfg: &ExperimentConfig) -> Result<TimeGrid, CliError> {
    TimeGrid::from_span(cfg.t_start, cfg.t_end, cfg.step).map_err(|e| CliError::config("step", e.to_string()))
}

pub fn kernel(cfg: &ExperimentConfig) -> Result<KernelConfig, CliError> {
    KernelConfig::new(cfg.lengthscale, cfg.amplitude).map_err(|e| CliError::config("lengthscale", e.to_string()))
}

/// True when the system's closed form passes through `x0` at the grid start.
fn exact_matches(sys: &dyn OdeSystem, t0: f64, x0: &DVector<f64>) -> bool {
    sys.has_exact() && sys.exact(t0).is_some_and(|e| (e - x0).amax() <= 1e-12 * (1.0 + x0.amax()))
}

/// Tight-tolerance Dormand-Prince solution used as the oracle for systems
/// without a usable closed form.
pub fn tight_reference(sys: &dyn OdeSystem, x0: &DVector<f64>, grid: &TimeGrid) -> Result<Trajectory, OdexError> {
    rk45_solve(sys, x0, (grid.t_start, grid.t_end()), &RkConfig::tight(), grid)
}

pub fn reference(
    which: Reference,
    sys: &dyn OdeSystem,
    x0: &DVector<f64>,
    grid: &TimeGrid,
) -> Result<Option<(&'static str, Trajectory)>, CliError> {
    let exact = || Trajectory::exact(sys, *grid).map(|t| ("exact", t));
    Ok(match which {
        Reference::None => None,
        Reference::Exact if exact_matches(sys, grid.t_start, x0) => exact(),
        Reference::Exact => return Err(CliError::config("reference", "system has no closed-form solution for this initial state")),
        Reference::Rk45 => Some(("rk45", tight_reference(sys, x0, grid)?)),
        Reference::Auto if exact_matches(sys, grid.t_start, x0) => exact(),
        Reference::Auto => Some(("rk45", tight_reference(sys, x0, grid)?)),
    })
}

pub fn solver_config(cfg: &ExperimentConfig, grid: TimeGrid) -> Result<SolverConfig, CliError> {
    let mut sc = SolverConfig::new(grid);
    sc.window = cfg.window;
    sc.samples = cfg.samples;
    sc.max_iterations = cfg.max_iter;
    sc.tolerance = cfg.tol;
    sc.use_second_derivatives = cfg.second_derivs;
    sc.kernel = kernel(cfg)?;
    sc.seed = cfg.seed;
    sc.parallel = cfg.parallel;
    sc.skilling_retain_values = cfg.retain_values;
    Ok(sc)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let sys = build_system(cfg)?;
    let sys: &dyn OdeSystem = sys.as_ref();
    let x0 = initial_state(cfg, sys)?;
    let grid = grid(cfg)?;

    let started = Instant::now();
    let (mean, std, f_evals) = match cfg.method {
        Method::Rk45 => {
            let counted = Counted::new(sys);
            let rk = RkConfig { rtol: cfg.rtol, atol: cfg.atol, ..RkConfig::default() };
            let traj = rk45_solve(&counted, &x0, (grid.t_start, grid.t_end()), &rk, &grid)?;
            let std = DMatrix::zeros(grid.count, sys.dim());
            (traj.states, std, counted.count())
        }
        Method::LinearGp => {
            let mut model = sys.as_linear().ok_or_else(|| CliError::config("method", "linear_gp needs a linear system"))?;
            model.noise_variance = cfg.noise;
            let sol = linear_gp_on_grid(&model, &kernel(cfg)?, grid, &x0)?;
            let (mean, std) = sol.moments();
            (mean, std, 0)
        }
        method => {
            let sc = solver_config(cfg, grid)?;
            let ens = match method {
                Method::Skilling => skilling_solve(sys, &x0, &sc)?,
                Method::Explicit => explicit_solve(sys, &x0, &sc)?,
                Method::ImplicitSample => implicit_sample(sys, &x0, &sc)?,
                Method::ImplicitMoment => implicit_moment_solve(sys, &x0, &sc)?,
                Method::GradientMatch => gradient_match_solve(sys, &x0, &sc)?,
                Method::Rk45 | Method::LinearGp => unreachable!("handled above"),
            };
            (ens.mean, ens.std, ens.f_evals)
        }
    };
    let wall_time = started.elapsed();

    let reference = reference(cfg.reference, sys, &x0, &grid)?;
    let errors = match &reference {
        Some((_, r)) => Some(ErrorSummary::between(&mean, &r.states)?),
        None => None,
    };
    Ok(RunOutcome { config: cfg.clone(), grid, mean, std, reference, errors, f_evals, wall_time })
}
