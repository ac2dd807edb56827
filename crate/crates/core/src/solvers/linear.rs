use nalgebra::{DMatrix, DVector};

use crate::error::{OdexError, Result};
use crate::gp::{symmetrize, DerivOrder, GaussianBelief, JitteredCholesky, KernelConfig, Site};
use crate::models::{LinearOdeModel, TimeGrid, Trajectory};

/// Known state (or state derivative) at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryCondition {
    pub t: f64,
    pub order: DerivOrder,
    pub value: DVector<f64>,
}

impl BoundaryCondition {
    pub fn initial(t: f64, value: DVector<f64>) -> Self {
        BoundaryCondition { t, order: DerivOrder::Value, value }
    }
}

/// Joint Gaussian posterior over the state at the query times.
///
/// Entries of `belief` are ordered time-major: index `q·d + i` is state
/// component `i` at `query_times[q]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGpSolution {
    pub query_times: Vec<f64>,
    pub dim: usize,
    pub belief: GaussianBelief,
}

impl LinearGpSolution {
    pub fn mean_at(&self, q: usize) -> DVector<f64> {
        self.belief.mean.rows(q * self.dim, self.dim).into_owned()
    }

    pub fn std_at(&self, q: usize) -> DVector<f64> {
        DVector::from_fn(self.dim, |i, _| self.belief.std(q * self.dim + i))
    }

    /// Posterior means and standard deviations as `Q × d` matrices.
    pub fn moments(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let q = self.query_times.len();
        let mean = DMatrix::from_fn(q, self.dim, |r, i| self.belief.mean[r * self.dim + i]);
        let std = DMatrix::from_fn(q, self.dim, |r, i| self.belief.std(r * self.dim + i));
        (mean, std)
    }

    pub fn mean_trajectory(&self, grid: TimeGrid) -> Result<Trajectory> {
        Trajectory::new(grid, self.moments().0)
    }
}

/// A linear functional of the state process: `Σ coef · D^order x_dim(t)`.
type Functional = Vec<(f64, usize, Site)>;

fn covariance(kernel: &KernelConfig, a: &Functional, b: &Functional) -> f64 {
    let mut c = 0.0;
    for &(ca, ia, sa) in a {
        for &(cb, ib, sb) in b {
            if ia == ib {
                c += ca * cb * kernel.eval(sa.t, sb.t, sa.order, sb.order);
            }
        }
    }
    c
}

/// Direct GP solution of the linear ODE `ẋ = L x − φ(t) + ε(t)`.
///
/// Each state component has an independent SE prior. The residual process
/// `y = ẋ − L x` is a linear functional of the state, so its covariance with
/// the state (and with itself) follows from differentiated kernel blocks,
/// with full cross-component terms when `L` couples components. The model
/// is conditioned on `y(tₙ) = −φ(tₙ)` (observation noise: the variance of
/// `ε`) and on the boundary conditions, then queried for the state.
pub fn linear_gp_solve(
    model: &LinearOdeModel,
    kernel: &KernelConfig,
    observations: &[(f64, DVector<f64>)],
    boundary: &[BoundaryCondition],
    query_times: &[f64],
) -> Result<LinearGpSolution> {
    kernel.validate()?;
    let d = model.dim();
    if boundary.is_empty() {
        return Err(OdexError::invalid("boundary", "at least one boundary condition is required"));
    }
    if query_times.is_empty() {
        return Err(OdexError::invalid("query_times", "no query times given"));
    }
    for v in observations.iter().map(|(_, v)| v).chain(boundary.iter().map(|b| &b.value)) {
        if v.len() != d {
            return Err(OdexError::DimensionMismatch { expected: d, found: v.len() });
        }
    }

    let mut rows: Vec<Functional> = Vec::new();
    let mut values = Vec::new();
    let mut noise = Vec::new();
    for (t, phi) in observations {
        for i in 0..d {
            let mut f: Functional = vec![(1.0, i, Site::deriv(*t))];
            for j in 0..d {
                let l = model.matrix[(i, j)];
                if l != 0.0 {
                    f.push((-l, j, Site::value(*t)));
                }
            }
            rows.push(f);
            values.push(-phi[i]);
            noise.push(model.noise_variance);
        }
    }
    for bc in boundary {
        for i in 0..d {
            rows.push(vec![(1.0, i, Site::new(bc.t, bc.order))]);
            values.push(bc.value[i]);
            noise.push(0.0);
        }
    }
    let queries: Vec<Functional> = query_times
        .iter()
        .flat_map(|&t| (0..d).map(move |i| vec![(1.0, i, Site::value(t))]))
        .collect();

    let n = rows.len();
    let kyy = DMatrix::from_fn(n, n, |r, c| covariance(kernel, &rows[r], &rows[c]) + if r == c { noise[r] } else { 0.0 });
    let kyq = DMatrix::from_fn(n, queries.len(), |r, c| covariance(kernel, &rows[r], &queries[c]));
    let kqq = DMatrix::from_fn(queries.len(), queries.len(), |r, c| covariance(kernel, &queries[r], &queries[c]));

    let chol = JitteredCholesky::new(&symmetrize(kyy))?;
    let solved = chol.solve(&kyq);
    let mean = solved.transpose() * DVector::from_vec(values);
    let cov = symmetrize(kqq - kyq.transpose() * solved);
    Ok(LinearGpSolution { query_times: query_times.to_vec(), dim: d, belief: GaussianBelief::new(mean, cov)? })
}

/// Solves the initial value problem on `grid`: the forcing is observed at
/// every knotpoint and the state is pinned at the first one.
pub fn linear_gp_on_grid(model: &LinearOdeModel, kernel: &KernelConfig, grid: TimeGrid, x1: &DVector<f64>) -> Result<LinearGpSolution> {
    let times = grid.times();
    let observations: Vec<_> = times.iter().map(|&t| (t, model.forcing.eval(t))).collect();
    linear_gp_solve(model, kernel, &observations, &[BoundaryCondition::initial(grid.t_start, x1.clone())], &times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{condition, ObservationSet};
    use crate::models::{forced_oscillator, linear_flow, Forcing, OdeSystem};

    fn decay_model() -> LinearOdeModel {
        LinearOdeModel::new(DMatrix::from_element(1, 1, -1.0), Forcing::zero(1), 0.0).unwrap()
    }

    #[test]
    fn zero_operator_is_plain_conditioning() {
        let model = LinearOdeModel::new(DMatrix::zeros(1, 1), Forcing::zero(1), 0.0).unwrap();
        let kernel = KernelConfig::default();
        let q = [0.0, 0.5, 1.3];
        let sol = linear_gp_solve(&model, &kernel, &[], &[BoundaryCondition::initial(0.0, DVector::from_vec(vec![1.0]))], &q).unwrap();
        let obs = ObservationSet::new().with(0.0, DerivOrder::Value, 1.0, 0.0).unwrap();
        let sites: Vec<Site> = q.iter().map(|&t| Site::value(t)).collect();
        let plain = condition(&kernel, &obs, &sites).unwrap();
        assert!((sol.belief.mean.clone() - plain.mean).amax() < 1e-12);
        assert!((sol.belief.covariance.clone() - plain.covariance).amax() < 1e-9);
    }

    #[test]
    fn scalar_decay() {
        let grid = TimeGrid::from_span(0.0, 2.0, 0.1).unwrap();
        let sol = linear_gp_on_grid(&decay_model(), &KernelConfig::default(), grid, &DVector::from_vec(vec![1.0])).unwrap();
        for (q, t) in grid.times().into_iter().enumerate() {
            assert!((sol.mean_at(q)[0] - (-t).exp()).abs() <= 0.05);
        }
        assert!(sol.std_at(0)[0] < 1e-4);
    }

    #[test]
    fn refinement_does_not_increase_error() {
        let model = decay_model();
        let x0 = DVector::from_vec(vec![1.0]);
        let mut last = f64::INFINITY;
        for n in [11, 21, 41] {
            let grid = TimeGrid::new(0.0, 2.0 / (n - 1) as f64, n).unwrap();
            let sol = linear_gp_on_grid(&model, &KernelConfig::default(), grid, &x0).unwrap();
            let err = (0..n)
                .map(|q| (sol.mean_at(q) - linear_flow(&model.matrix, &DVector::zeros(1), grid.t(q), &x0)).amax())
                .fold(0.0, f64::max);
            assert!(err <= last, "{err} > {last} at n = {n}");
            last = err;
        }
    }

    #[test]
    fn coupled_forced_oscillator() {
        let sys = forced_oscillator(2.0).unwrap();
        let model = sys.as_linear().unwrap();
        let grid = TimeGrid::from_span(0.0, 5.0, 0.1).unwrap();
        let sol = linear_gp_on_grid(&model, &KernelConfig::default(), grid, &sys.exact(0.0).unwrap()).unwrap();
        let exact = Trajectory::exact(&sys, grid).unwrap();
        let (mean, std) = sol.moments();
        assert!((mean - exact.states).amax() < 0.05);
        assert!(std.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn rejects_missing_boundary_and_bad_dims() {
        let model = decay_model();
        let k = KernelConfig::default();
        assert!(linear_gp_solve(&model, &k, &[], &[], &[0.0]).is_err());
        let bad = BoundaryCondition::initial(0.0, DVector::zeros(2));
        assert!(matches!(linear_gp_solve(&model, &k, &[], &[bad], &[0.0]), Err(OdexError::DimensionMismatch { .. })));
    }

    #[test]
    fn observation_noise_widens_posterior() {
        let grid = TimeGrid::from_span(0.0, 2.0, 0.2).unwrap();
        let x0 = DVector::from_vec(vec![1.0]);
        let quiet = linear_gp_on_grid(&decay_model(), &KernelConfig::default(), grid, &x0).unwrap();
        let noisy_model = LinearOdeModel::new(DMatrix::from_element(1, 1, -1.0), Forcing::zero(1), 0.1).unwrap();
        let noisy = linear_gp_on_grid(&noisy_model, &KernelConfig::default(), grid, &x0).unwrap();
        let last = grid.count - 1;
        assert!(noisy.std_at(last)[0] > quiet.std_at(last)[0]);
    }
}
