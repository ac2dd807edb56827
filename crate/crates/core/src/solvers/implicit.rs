use nalgebra::{DMatrix, DVector};

use super::{check_inputs, trivial_ensemble, Conditioning, Slopes, SolutionEnsemble, SolverConfig, SolverStats};
use crate::error::{OdexError, Result};
use crate::gp::{sampling_factor, standard_normal_vector, KernelConfig, LinearPredictor, Site};
use crate::models::{Counted, OdeSystem, TimeGrid};
use crate::parallel::try_map_indexed;
use crate::rng;

/// A sliding window: the last finalized knotpoint (`anchor`) plus up to `M`
/// unknown knotpoints after it. Slopes from up to `M` finalized knotpoints
/// before the anchor are kept as history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Window {
    pub anchor: usize,
    pub end: usize,
    pub history_start: usize,
}

impl Window {
    pub fn at(anchor: usize, window: usize, grid: &TimeGrid) -> Self {
        Window {
            anchor,
            end: (anchor + window).min(grid.count - 1),
            history_start: anchor.saturating_sub(window),
        }
    }

    /// Number of unknown knotpoints.
    pub fn len(&self) -> usize {
        self.end - self.anchor
    }

    pub fn is_last(&self, grid: &TimeGrid) -> bool {
        self.end == grid.count - 1
    }

    pub fn unknown_times(&self, grid: &TimeGrid) -> Vec<f64> {
        (self.anchor + 1..=self.end).map(|n| grid.t(n)).collect()
    }
}

/// Value belief over a window given the anchor value (observed with the
/// variance it was finalized with), the finalized slopes, and slopes at the
/// unknown knotpoints. Sites are fixed for the window; only the slope
/// values change between fixed-point iterations.
pub(crate) struct WindowBelief {
    pub predictor: LinearPredictor,
    fixed: DMatrix<f64>,
    per_point: usize,
    pub conditioning_size: usize,
}

impl WindowBelief {
    pub fn new(
        kernel: &KernelConfig,
        grid: &TimeGrid,
        window: &Window,
        anchor_value: &DVector<f64>,
        anchor_variance: f64,
        finalized: &[Slopes],
        second_derivatives: bool,
    ) -> Result<Self> {
        let d = anchor_value.len();
        let mut fixed = Conditioning::default();
        fixed.push(Site::value(grid.t(window.anchor)), anchor_variance, anchor_value.clone());
        for (k, slopes) in finalized.iter().enumerate().take(window.anchor + 1).skip(window.history_start) {
            slopes.push_into(&mut fixed, grid.t(k), 0.0);
        }
        let per_point = if second_derivatives { 2 } else { 1 };
        let mut sites = fixed.sites.clone();
        let mut noise = fixed.noise.clone();
        for t in window.unknown_times(grid) {
            sites.push(Site::deriv(t));
            if second_derivatives {
                sites.push(Site::second(t));
            }
            noise.extend(std::iter::repeat_n(0.0, per_point));
        }
        let queries: Vec<Site> = window.unknown_times(grid).into_iter().map(Site::value).collect();
        let predictor = LinearPredictor::new(kernel, &sites, &noise, &queries)?;
        Ok(WindowBelief { predictor, fixed: fixed.value_matrix(d), per_point, conditioning_size: sites.len() })
    }

    /// Posterior means (`len × d`) given slopes at the unknown knotpoints.
    pub fn mean(&self, slopes: &[Slopes]) -> DMatrix<f64> {
        let d = self.fixed.ncols();
        let nf = self.fixed.nrows();
        let mut y = DMatrix::zeros(nf + slopes.len() * self.per_point, d);
        y.view_mut((0, 0), (nf, d)).copy_from(&self.fixed);
        let mut r = nf;
        for s in slopes {
            y.set_row(r, &s.first.transpose());
            r += 1;
            if self.per_point == 2 {
                y.set_row(r, &s.second.as_ref().expect("second derivative requested").transpose());
                r += 1;
            }
        }
        &self.predictor.weights * y
    }

    pub fn variance(&self, j: usize) -> f64 {
        self.predictor.variance(j)
    }
}

pub(crate) fn eval_slopes(sys: &dyn OdeSystem, grid: &TimeGrid, window: &Window, states: &[DVector<f64>], cfg: &SolverConfig) -> Result<Vec<Slopes>> {
    states
        .iter()
        .enumerate()
        .map(|(j, x)| Slopes::eval(sys, grid.t(window.anchor + 1 + j), x, cfg))
        .collect()
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.row_iter().map(|r| r.transpose()).collect()
}

/// Shifts the window guess forward one knotpoint: drop the finalized
/// state, extend by constant extrapolation, trim to the next window length.
pub(crate) fn shift_guess(guess: &mut Vec<DVector<f64>>, next_len: usize) {
    let first = guess.remove(0);
    let last = guess.last().cloned().unwrap_or(first);
    while guess.len() < next_len {
        guess.push(last.clone());
    }
    guess.truncate(next_len);
}

/// Deterministic moment fixed point on a sliding window.
///
/// Within each window the Gaussian belief over the unknown states is
/// updated by re-evaluating the vector field at its mean until the mean
/// moves by less than the tolerance. The window then slides one knotpoint,
/// and the departing state becomes the new anchor, observed with its
/// converged variance; uncertainty therefore accumulates over time.
pub fn implicit_moment_solve(sys: &dyn OdeSystem, x1: &DVector<f64>, cfg: &SolverConfig) -> Result<SolutionEnsemble> {
    cfg.validate_fixed_point()?;
    check_inputs(sys, x1)?;
    let grid = cfg.grid;
    let d = x1.len();
    if grid.count == 1 {
        let mut e = trivial_ensemble(grid, x1);
        e.samples.clear();
        return Ok(e);
    }
    let counted = Counted::new(sys);
    let sys: &dyn OdeSystem = &counted;
    let mut stats = SolverStats::default();

    let mut mean = DMatrix::zeros(grid.count, d);
    let mut var = vec![0.0; grid.count];
    mean.set_row(0, &x1.transpose());
    let mut finalized = vec![Slopes::eval(sys, grid.t(0), x1, cfg)?];

    let mut anchor = 0;
    let mut window = Window::at(anchor, cfg.window, &grid);
    let mut guess = vec![x1.clone(); window.len()];
    loop {
        let anchor_value = mean.row(anchor).transpose();
        let belief = WindowBelief::new(&cfg.kernel, &grid, &window, &anchor_value, var[anchor], &finalized, cfg.use_second_derivatives)?;
        stats.max_conditioning_size = stats.max_conditioning_size.max(belief.conditioning_size);

        let mut converged = None;
        let mut change = f64::INFINITY;
        for it in 1..=cfg.max_iterations {
            let slopes = eval_slopes(sys, &grid, &window, &guess, cfg)?;
            let updated = rows(&belief.mean(&slopes));
            change = updated.iter().zip(&guess).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
            guess = updated;
            if !change.is_finite() {
                break;
            }
            if change < cfg.tolerance {
                // the confirming pass does not count as an update
                converged = Some(it - 1);
                break;
            }
        }
        let Some(iterations) = converged else {
            return Err(OdexError::NonConvergence { t: grid.t(anchor), iterations: cfg.max_iterations, change });
        };
        stats.window_iterations.push(iterations);

        if window.is_last(&grid) {
            for (j, x) in guess.iter().enumerate() {
                mean.set_row(anchor + 1 + j, &x.transpose());
                var[anchor + 1 + j] = belief.variance(j);
            }
            break;
        }
        let next = anchor + 1;
        mean.set_row(next, &guess[0].transpose());
        var[next] = belief.variance(0);
        finalized.push(Slopes::eval(sys, grid.t(next), &guess[0], cfg)?);
        anchor = next;
        window = Window::at(anchor, cfg.window, &grid);
        shift_guess(&mut guess, window.len());
    }

    let std = DMatrix::from_fn(grid.count, d, |r, _| var[r].sqrt());
    let mut ens = SolutionEnsemble::from_moments(grid, mean, std);
    ens.f_evals = counted.count();
    ens.stats = stats;
    Ok(ens)
}

/// Sampling form of the implicit recursion.
///
/// Starting from a constant extrapolation of `x₁`, each of `I` iterations
/// evaluates the vector field along the current draw and replaces the draw
/// with a joint sample of the window given those slopes. With `M ≥ N − 1`
/// the whole grid is a single window.
pub fn implicit_sample(sys: &dyn OdeSystem, x1: &DVector<f64>, cfg: &SolverConfig) -> Result<SolutionEnsemble> {
    cfg.validate()?;
    check_inputs(sys, x1)?;
    let grid = cfg.grid;
    if grid.count == 1 {
        return Ok(trivial_ensemble(grid, x1));
    }
    let counted = Counted::new(sys);
    let runs = try_map_indexed(cfg.samples, cfg.parallel, |l| sample_path(&counted, x1, cfg, l as u64))?;
    let mut stats = SolverStats::default();
    let mut samples = Vec::with_capacity(runs.len());
    for (path, s) in runs {
        stats.merge(&s);
        samples.push(path);
    }
    let mut ens = SolutionEnsemble::from_samples(grid, x1, samples);
    ens.f_evals = counted.count();
    ens.stats = stats;
    Ok(ens)
}

fn sample_path(sys: &dyn OdeSystem, x1: &DVector<f64>, cfg: &SolverConfig, member: u64) -> Result<(DMatrix<f64>, SolverStats)> {
    let grid = cfg.grid;
    let d = x1.len();
    let mut stats = SolverStats::default();
    let mut path = DMatrix::zeros(grid.count, d);
    let mut var = vec![0.0; grid.count];
    path.set_row(0, &x1.transpose());
    let mut finalized = vec![Slopes::eval(sys, grid.t(0), x1, cfg)?];

    let mut anchor = 0;
    let mut window = Window::at(anchor, cfg.window, &grid);
    let mut guess = vec![x1.clone(); window.len()];
    loop {
        let anchor_value = path.row(anchor).transpose();
        let belief = WindowBelief::new(&cfg.kernel, &grid, &window, &anchor_value, var[anchor], &finalized, cfg.use_second_derivatives)?;
        stats.max_conditioning_size = stats.max_conditioning_size.max(belief.conditioning_size);
        let factor = sampling_factor(&belief.predictor.covariance)?;

        for it in 0..cfg.max_iterations {
            let slopes = eval_slopes(sys, &grid, &window, &guess, cfg)?;
            let means = belief.mean(&slopes);
            let mut rng = rng::stream(cfg.seed, &[member, anchor as u64, it as u64]);
            let mut draw = means;
            for i in 0..d {
                let z = standard_normal_vector(window.len(), &mut rng);
                let col = draw.column(i) + &factor * z;
                draw.set_column(i, &col);
            }
            guess = rows(&draw);
        }

        if window.is_last(&grid) {
            for (j, x) in guess.iter().enumerate() {
                path.set_row(anchor + 1 + j, &x.transpose());
            }
            break;
        }
        let next = anchor + 1;
        path.set_row(next, &guess[0].transpose());
        var[next] = belief.variance(0);
        finalized.push(Slopes::eval(sys, grid.t(next), &guess[0], cfg)?);
        anchor = next;
        window = Window::at(anchor, cfg.window, &grid);
        shift_guess(&mut guess, window.len());
    }
    Ok((path, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{linear_system, FnSystem, Forcing, OdeSystem};

    fn decay() -> crate::models::LinearSystem {
        linear_system(DMatrix::from_element(1, 1, -1.0), Forcing::zero(1)).unwrap()
    }

    #[test]
    fn window_geometry() {
        let grid = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let w = Window::at(0, 4, &grid);
        assert_eq!((w.len(), w.history_start, w.is_last(&grid)), (4, 0, false));
        let w = Window::at(7, 4, &grid);
        assert_eq!((w.len(), w.history_start, w.is_last(&grid)), (2, 3, true));
    }

    #[test]
    fn zero_field_converges_immediately() {
        let sys = FnSystem::new("zero", 1, |_t, x: &DVector<f64>| DVector::zeros(x.len()));
        let grid = TimeGrid::from_span(0.0, 1.0, 0.05).unwrap();
        let cfg = SolverConfig::new(grid);
        let x1 = DVector::from_vec(vec![2.5]);
        let ens = implicit_moment_solve(&sys, &x1, &cfg).unwrap();
        assert!(ens.stats.window_iterations.iter().all(|&i| i == 1), "{:?}", ens.stats.window_iterations);
        let drift = ens.mean.column(0).add_scalar(-2.5).amax();
        assert!(drift < 1e-6, "{drift}");
        assert!(ens.samples.is_empty());
    }

    #[test]
    fn exponential_decay_moment() {
        let sys = decay();
        let grid = TimeGrid::from_span(0.0, 1.0, 0.05).unwrap();
        let ens = implicit_moment_solve(&sys, &DVector::from_vec(vec![1.0]), &SolverConfig::new(grid)).unwrap();
        for n in 0..grid.count {
            assert!((ens.mean[(n, 0)] - (-grid.t(n)).exp()).abs() <= 1e-3);
        }
        assert_eq!(ens.mean[(0, 0)], 1.0);
    }

    #[test]
    fn zero_iterations_return_initialization() {
        let sys = decay();
        let grid = TimeGrid::from_span(0.0, 1.0, 0.1).unwrap();
        let mut cfg = SolverConfig::new(grid);
        cfg.max_iterations = 0;
        cfg.samples = 2;
        let x1 = DVector::from_vec(vec![1.0]);
        let ens = implicit_sample(&sys, &x1, &cfg).unwrap();
        for s in &ens.samples {
            assert!(s.iter().all(|&v| v == 1.0));
        }
        assert!(implicit_moment_solve(&sys, &x1, &cfg).is_err());
    }

    #[test]
    fn picard_sampling_contracts() {
        let sys = decay();
        let grid = TimeGrid::from_span(0.0, 2.0, 0.1).unwrap();
        let x1 = DVector::from_vec(vec![1.0]);
        let err = |iters: usize| {
            let mut cfg = SolverConfig::new(grid);
            cfg.max_iterations = iters;
            cfg.window = grid.count;
            cfg.samples = 5;
            let ens = implicit_sample(&sys, &x1, &cfg).unwrap();
            (0..grid.count).map(|n| (ens.mean[(n, 0)] - (-grid.t(n)).exp()).abs()).fold(0.0, f64::max)
        };
        let e1 = err(1);
        let e20 = err(20);
        assert!(e20 < e1, "{e20} !< {e1}");
        assert!(e20 < 1e-3);
    }

    #[test]
    fn nonconvergence_reported() {
        let sys = FnSystem::new("stiff", 1, |_t, x: &DVector<f64>| x * -400.0);
        let grid = TimeGrid::from_span(0.0, 1.0, 0.1).unwrap();
        let mut cfg = SolverConfig::new(grid);
        cfg.max_iterations = 20;
        let r = implicit_moment_solve(&sys, &DVector::from_vec(vec![1.0]), &cfg);
        assert!(matches!(r, Err(OdexError::NonConvergence { .. })), "{r:?}");
        assert_eq!(sys.dim(), 1);
    }

    #[test]
    fn uncertainty_grows_along_the_window_chain() {
        let sys = decay();
        let grid = TimeGrid::from_span(0.0, 2.0, 0.05).unwrap();
        let ens = implicit_moment_solve(&sys, &DVector::from_vec(vec![1.0]), &SolverConfig::new(grid)).unwrap();
        assert_eq!(ens.std[(0, 0)], 0.0);
        assert!(ens.std[(grid.count - 1, 0)] > ens.std[(grid.index_of(0.5), 0)]);
    }
}
