use nalgebra::{DMatrix, DVector};

use super::{check_inputs, draw_scalar, trivial_ensemble, Conditioning, Slopes, SolutionEnsemble, SolverConfig, SolverStats};
use crate::error::Result;
use crate::gp::Site;
use crate::models::{Counted, OdeSystem};
use crate::parallel::try_map_indexed;
use crate::rng;

/// Explicit multistep sampler.
///
/// Each step predicts a putative next state from the last `M + 1` values
/// and slopes, evaluates the vector field there, and resamples the next
/// state with that slope added to the conditioning set.
pub fn explicit_solve(sys: &dyn OdeSystem, x1: &DVector<f64>, cfg: &SolverConfig) -> Result<SolutionEnsemble> {
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
    let mut rng = rng::stream(cfg.seed, &[member]);
    let mut stats = SolverStats::default();

    let mut values = Vec::with_capacity(grid.count);
    let mut slopes = Vec::with_capacity(grid.count);
    values.push(x1.clone());
    slopes.push(Slopes::eval(sys, grid.t(0), x1, cfg)?);

    for n in 0..grid.count - 1 {
        let lo = n.saturating_sub(cfg.window);
        let mut cond = Conditioning::default();
        for k in lo..=n {
            let t = grid.t(k);
            cond.push(Site::value(t), 0.0, values[k].clone());
            slopes[k].push_into(&mut cond, t, 0.0);
        }
        let t_next = grid.t(n + 1);
        let query = [Site::value(t_next)];

        let pred = cond.predictor(&cfg.kernel, &query)?;
        let mean = (&pred.weights * cond.value_matrix(d)).row(0).transpose();
        let putative = draw_scalar(&mean, pred.variance(0), &mut rng);

        Slopes::eval(sys, t_next, &putative, cfg)?.push_into(&mut cond, t_next, 0.0);
        stats.max_conditioning_size = stats.max_conditioning_size.max(cond.len());
        let pred = cond.predictor(&cfg.kernel, &query)?;
        let mean = (&pred.weights * cond.value_matrix(d)).row(0).transpose();
        let next = draw_scalar(&mean, pred.variance(0), &mut rng);

        slopes.push(Slopes::eval(sys, t_next, &next, cfg)?);
        values.push(next);
    }

    let mut path = DMatrix::zeros(grid.count, d);
    for (n, v) in values.iter().enumerate() {
        path.set_row(n, &v.transpose());
    }
    Ok((path, stats))
}
