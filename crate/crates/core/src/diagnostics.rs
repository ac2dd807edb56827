//! Solver-agnostic error estimates.
//!
//! Given any proposed solution on a grid, a GP conditioned on the solution
//! values (and the known initial slope) predicts the derivative at every
//! later knotpoint. The expected squared mismatch between that prediction
//! and the vector field, `σ̇²ₙ = E[(f(xₙ) − ẋₙ)²]`, is a local error
//! estimate. Feeding the vector field back in as derivative observations
//! with noise `σ̇²ₙ` then yields a likelihood score for the whole solution.

use nalgebra::{DMatrix, DVector};

use crate::error::{OdexError, Result};
use crate::gp::{sampling_factor, standard_normal_vector, JitteredCholesky, KernelConfig, LinearPredictor, Site};
use crate::models::{eval_f, OdeSystem, Trajectory};
use crate::rng;

/// How the expected squared derivative mismatch is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MismatchEstimate {
    /// Squared bias plus predictive variance (exact and deterministic).
    #[default]
    ClosedForm,
    /// Monte Carlo average over joint draws of the predicted derivatives.
    Sampled { seed: u64, samples: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    /// `σ̇²ₙ` for knotpoints `2..N` (rows) and each state component.
    pub derivative_error_variance: DMatrix<f64>,
    /// GP-predicted derivatives at knotpoints `2..N`.
    pub derivative_mean: DMatrix<f64>,
    /// Predictive variance of those derivatives (shared by all components).
    pub derivative_posterior_variance: Vec<f64>,
    /// Log-density of the solution under the derivative-conditioned GP (nats).
    pub log_likelihood: f64,
    /// `log_likelihood` divided by the number of scored values.
    pub log_likelihood_per_knot: f64,
    /// Posterior std of the states given the derivative observations (`N × d`, first row zero).
    pub posterior_std: DMatrix<f64>,
}

impl ErrorReport {
    /// Median of `σ̇²ₙ` over knotpoints, per component.
    pub fn median_error_variance(&self) -> Vec<f64> {
        self.derivative_error_variance
            .column_iter()
            .map(|c| {
                let mut v: Vec<f64> = c.iter().copied().collect();
                v.sort_by(f64::total_cmp);
                let m = v.len() / 2;
                if v.len().is_multiple_of(2) {
                    0.5 * (v[m - 1] + v[m])
                } else {
                    v[m]
                }
            })
            .collect()
    }
}

pub fn estimate_errors(sys: &dyn OdeSystem, solution: &Trajectory, kernel: &KernelConfig) -> Result<ErrorReport> {
    estimate_errors_with(sys, solution, kernel, MismatchEstimate::ClosedForm)
}

pub fn estimate_errors_with(
    sys: &dyn OdeSystem,
    solution: &Trajectory,
    kernel: &KernelConfig,
    mode: MismatchEstimate,
) -> Result<ErrorReport> {
    kernel.validate()?;
    let grid = solution.grid;
    let n = grid.count;
    let d = solution.dim();
    if n < 2 {
        return Err(OdexError::invalid("solution", "needs at least two knotpoints"));
    }
    if d != sys.dim() {
        return Err(OdexError::DimensionMismatch { expected: sys.dim(), found: d });
    }
    let times = grid.times();
    let x = &solution.states;
    let slopes: Vec<DVector<f64>> = (0..n).map(|k| eval_f(sys, times[k], &solution.state(k))).collect::<Result<_>>()?;

    // Derivative prediction from all values and the initial slope.
    let mut sites: Vec<Site> = times.iter().map(|&t| Site::value(t)).collect();
    sites.push(Site::deriv(times[0]));
    let mut y = DMatrix::zeros(n + 1, d);
    y.view_mut((0, 0), (n, d)).copy_from(x);
    y.set_row(n, &slopes[0].transpose());
    let queries: Vec<Site> = times[1..].iter().map(|&t| Site::deriv(t)).collect();
    let pred = LinearPredictor::new(kernel, &sites, &vec![0.0; sites.len()], &queries)?;
    let mu = &pred.weights * y;
    let pred_var: Vec<f64> = (0..n - 1).map(|k| pred.variance(k)).collect();
    let f_rest = DMatrix::from_fn(n - 1, d, |k, i| slopes[k + 1][i]);

    let sigma2 = match mode {
        MismatchEstimate::ClosedForm => DMatrix::from_fn(n - 1, d, |k, i| (f_rest[(k, i)] - mu[(k, i)]).powi(2) + pred_var[k]),
        MismatchEstimate::Sampled { seed, samples } => {
            if samples == 0 {
                return Err(OdexError::invalid("samples", "must be >= 1"));
            }
            let factor = sampling_factor(&pred.covariance)?;
            let mut acc = DMatrix::zeros(n - 1, d);
            for s in 0..samples {
                let mut rng = rng::stream(seed, &[s as u64]);
                for i in 0..d {
                    let draw = mu.column(i) + &factor * standard_normal_vector(n - 1, &mut rng);
                    for k in 0..n - 1 {
                        acc[(k, i)] += (f_rest[(k, i)] - draw[k]).powi(2);
                    }
                }
            }
            acc / samples as f64
        }
    };

    // Likelihood of x₂..x_N given x₁, ẋ₁ and the vector field as noisy slopes.
    let mut like_sites = vec![Site::value(times[0]), Site::deriv(times[0])];
    like_sites.extend(times[1..].iter().map(|&t| Site::deriv(t)));
    let value_queries: Vec<Site> = times[1..].iter().map(|&t| Site::value(t)).collect();
    let mut log_likelihood = 0.0;
    let mut posterior_std = DMatrix::zeros(n, d);
    for i in 0..d {
        let mut noise = vec![0.0, 0.0];
        noise.extend(sigma2.column(i).iter());
        let p = LinearPredictor::new(kernel, &like_sites, &noise, &value_queries)?;
        let mut obs = DVector::zeros(n + 1);
        obs[0] = x[(0, i)];
        obs[1] = slopes[0][i];
        for k in 1..n {
            obs[k + 1] = slopes[k][i];
        }
        let residual = x.column(i).rows(1, n - 1) - p.mean(&obs);
        let chol = JitteredCholesky::new(&p.covariance)?;
        let quad = residual.dot(&chol.solve_vec(&residual));
        log_likelihood += -0.5 * (quad + chol.log_det() + (n - 1) as f64 * (2.0 * std::f64::consts::PI).ln());
        for k in 1..n {
            posterior_std[(k, i)] = p.variance(k - 1).sqrt();
        }
    }

    Ok(ErrorReport {
        derivative_error_variance: sigma2,
        derivative_mean: mu,
        derivative_posterior_variance: pred_var,
        log_likelihood,
        log_likelihood_per_knot: log_likelihood / ((n - 1) * d) as f64,
        posterior_std,
    })
}
