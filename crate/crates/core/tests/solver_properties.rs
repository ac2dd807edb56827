//! Cross-solver properties on the forced oscillator benchmark
//! (θ = 2, t ∈ [0, 10], x(0) = (−1, 0)), checked against its closed form.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use odex_core::diagnostics::estimate_errors;
use odex_core::gp::KernelConfig;
use odex_core::models::{forced_oscillator, ForcedOscillator, TimeGrid, Trajectory};
use odex_core::solvers::{
    explicit_solve, gradient_match_solve, implicit_moment_solve, implicit_sample, skilling_solve, ErrorSummary, SolutionEnsemble,
    SolverConfig,
};
use odex_core::Result;

const THETA: f64 = 2.0;

type Solver = fn(&dyn odex_core::models::OdeSystem, &DVector<f64>, &SolverConfig) -> Result<SolutionEnsemble>;

/// `x'' + x = sin(θt)` from rest at `x = −1`, solved by hand.
fn closed_form(grid: &TimeGrid) -> DMatrix<f64> {
    let k = 1.0 - THETA * THETA;
    DMatrix::from_fn(grid.count, 2, |n, c| {
        let t = grid.t(n);
        if c == 0 {
            -t.cos() + ((THETA * t).sin() - THETA * t.sin()) / k
        } else {
            t.sin() + THETA * ((THETA * t).cos() - t.cos()) / k
        }
    })
}

/// Soft checks report on the stderr handle directly so the warning is
/// visible even when the harness captures test output.
fn warn(msg: std::fmt::Arguments) {
    let _ = writeln!(std::io::stderr(), "warning: {msg}");
}

fn setup(step: f64, window: usize) -> (ForcedOscillator, DVector<f64>, SolverConfig) {
    let mut cfg = SolverConfig::new(TimeGrid::from_span(0.0, 10.0, step).unwrap());
    cfg.window = window;
    cfg.seed = 11;
    (forced_oscillator(THETA).unwrap(), DVector::from_vec(vec![-1.0, 0.0]), cfg)
}

fn rmse(solve: Solver, step: f64, window: usize, second: bool) -> f64 {
    let (sys, x0, mut cfg) = setup(step, window);
    cfg.use_second_derivatives = second;
    let sol = solve(&sys, &x0, &cfg).unwrap();
    ErrorSummary::between(&sol.mean, &closed_form(&cfg.grid)).unwrap().rmse
}

#[test]
fn accuracy_ordering_at_matched_grid_and_seed() {
    let skilling = rmse(skilling_solve, 0.25, 1, false);
    let explicit = rmse(explicit_solve, 0.25, 1, false);
    let implicit = rmse(implicit_moment_solve, 0.25, 5, false);
    assert!(explicit < skilling, "explicit {explicit} vs skilling {skilling}");
    assert!(implicit <= explicit, "implicit {implicit} vs explicit {explicit}");
}

#[test]
fn halving_the_step_does_not_hurt() {
    for (name, solve, window) in [("explicit", explicit_solve as Solver, 1), ("implicit_moment", implicit_moment_solve, 5)] {
        let coarse = rmse(solve, 0.25, window, false);
        let fine = rmse(solve, 0.125, window, false);
        assert!(fine <= 1.1 * coarse, "{name}: {coarse} -> {fine}");
    }
}

#[test]
fn second_derivative_observations_soft_check() {
    for (name, solve, window) in [("explicit", explicit_solve as Solver, 1), ("implicit_moment", implicit_moment_solve, 5)] {
        let base = rmse(solve, 0.25, window, false);
        let with = rmse(solve, 0.25, window, true);
        assert!(with.is_finite());
        if with > 1.1 * base {
            warn(format_args!("{name} with second derivatives RMSE {with:e} exceeds {base:e} by more than 10%"));
        }
    }
}

#[test]
fn likelihood_per_knot_under_refinement_soft_check() {
    let sys = forced_oscillator(THETA).unwrap();
    let score = |step: f64| {
        let grid = TimeGrid::from_span(0.0, 10.0, step).unwrap();
        let exact = Trajectory::new(grid, closed_form(&grid)).unwrap();
        estimate_errors(&sys, &exact, &KernelConfig::default()).unwrap().log_likelihood_per_knot
    };
    let (coarse, fine) = (score(0.2), score(0.1));
    assert!(coarse.is_finite() && fine.is_finite());
    if fine < coarse {
        warn(format_args!("log-likelihood per knot fell from {coarse:e} to {fine:e} under refinement"));
    }
}

#[test]
fn parallel_and_sequential_ensembles_agree() {
    let cases: [(Solver, usize); 5] =
        [(skilling_solve, 1), (explicit_solve, 1), (implicit_sample, 3), (implicit_moment_solve, 5), (gradient_match_solve, 10)];
    for (solve, window) in cases {
        let (sys, x0, mut cfg) = setup(0.25, window);
        cfg.samples = 8;
        cfg.max_iterations = 20;
        cfg.parallel = true;
        let par = solve(&sys, &x0, &cfg);
        cfg.parallel = false;
        let seq = solve(&sys, &x0, &cfg);
        match (par, seq) {
            (Ok(p), Ok(s)) => assert_eq!(p, s),
            (Err(p), Err(s)) => assert_eq!(p, s),
            (p, s) => panic!("modes disagree on success: {:?} vs {:?}", p.err(), s.err()),
        }
    }
}

#[test]
fn ensemble_bands_are_well_formed() {
    for (solve, window) in [(skilling_solve as Solver, 1), (explicit_solve, 1), (implicit_sample, 3)] {
        let (sys, x0, cfg) = setup(0.25, window);
        let sol = solve(&sys, &x0, &cfg).unwrap();
        assert_eq!(sol.samples.len(), cfg.samples);
        assert_eq!(sol.mean.shape(), (cfg.grid.count, 2));
        assert!(sol.std.iter().all(|&s| s >= 0.0 && s.is_finite()));
        assert_eq!(sol.mean.row(0).transpose(), x0);
        assert!(sol.f_evals > 0);
    }
}

#[test]
fn seeds_change_samples_but_not_moment_solutions() {
    let (sys, x0, mut cfg) = setup(0.25, 1);
    let a = explicit_solve(&sys, &x0, &cfg).unwrap();
    cfg.seed += 1;
    let b = explicit_solve(&sys, &x0, &cfg).unwrap();
    assert_ne!(a.samples, b.samples);

    cfg.window = 5;
    let m1 = implicit_moment_solve(&sys, &x0, &cfg).unwrap();
    cfg.seed += 1;
    let m2 = implicit_moment_solve(&sys, &x0, &cfg).unwrap();
    assert_eq!(m1.mean, m2.mean);
}
