//! ODE systems, time grids and the benchmark problems.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{OdexError, Result};

/// A first-order system `ẋ = f(t, x)` with optional analytic extras.
///
/// Implementations must be pure: `rhs` may be called concurrently from
/// several threads and must not depend on hidden mutable state.
pub trait OdeSystem: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn params(&self) -> Vec<f64> {
        Vec::new()
    }

    fn rhs(&self, t: f64, x: &DVector<f64>) -> DVector<f64>;

    /// `J[i][j] = ∂fᵢ/∂xⱼ`, if known in closed form.
    fn jacobian(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// `∂f/∂t`, if known in closed form.
    fn time_partial(&self, _t: f64, _x: &DVector<f64>) -> Option<DVector<f64>> {
        None
    }

    fn exact(&self, _t: f64) -> Option<DVector<f64>> {
        None
    }

    fn has_exact(&self) -> bool {
        false
    }

    /// Suggested initial state for benchmarks.
    fn default_initial_state(&self) -> Option<DVector<f64>> {
        None
    }

    /// Decomposition `f = L x − φ(t)` when the system is linear.
    fn as_linear(&self) -> Option<LinearOdeModel> {
        None
    }
}

/// Whether derivatives missing from a system may be approximated by
/// central differences of `f`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DerivativePolicy {
    #[default]
    AllowFiniteDifference,
    AnalyticOnly,
}

fn check_dim(sys: &dyn OdeSystem, x: &DVector<f64>) -> Result<()> {
    if x.len() != sys.dim() {
        return Err(OdexError::DimensionMismatch { expected: sys.dim(), found: x.len() });
    }
    Ok(())
}

pub fn eval_f(sys: &dyn OdeSystem, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(sys, x)?;
    let out = sys.rhs(t, x);
    if out.len() != sys.dim() {
        return Err(OdexError::DimensionMismatch { expected: sys.dim(), found: out.len() });
    }
    Ok(out)
}

fn fd_step(v: f64) -> f64 {
    1e-6 * v.abs().max(1.0)
}

pub fn finite_difference_jacobian(sys: &dyn OdeSystem, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
    let d = sys.dim();
    let mut jac = DMatrix::zeros(d, d);
    let mut xp = x.clone();
    for j in 0..d {
        let h = fd_step(x[j]);
        xp[j] = x[j] + h;
        let fp = sys.rhs(t, &xp);
        xp[j] = x[j] - h;
        let fm = sys.rhs(t, &xp);
        xp[j] = x[j];
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

pub fn finite_difference_time_partial(sys: &dyn OdeSystem, t: f64, x: &DVector<f64>) -> DVector<f64> {
    let h = fd_step(t);
    (sys.rhs(t + h, x) - sys.rhs(t - h, x)) / (2.0 * h)
}

pub fn jacobian(sys: &dyn OdeSystem, t: f64, x: &DVector<f64>, policy: DerivativePolicy) -> Result<DMatrix<f64>> {
    check_dim(sys, x)?;
    match (sys.jacobian(t, x), policy) {
        (Some(j), _) => Ok(j),
        (None, DerivativePolicy::AllowFiniteDifference) => Ok(finite_difference_jacobian(sys, t, x)),
        (None, DerivativePolicy::AnalyticOnly) => {
            Err(OdexError::MissingDerivativeInfo { system: sys.name().to_string(), what: "jacobian" })
        }
    }
}

pub fn time_partial(sys: &dyn OdeSystem, t: f64, x: &DVector<f64>, policy: DerivativePolicy) -> Result<DVector<f64>> {
    check_dim(sys, x)?;
    match (sys.time_partial(t, x), policy) {
        (Some(p), _) => Ok(p),
        (None, DerivativePolicy::AllowFiniteDifference) => Ok(finite_difference_time_partial(sys, t, x)),
        (None, DerivativePolicy::AnalyticOnly) => {
            Err(OdexError::MissingDerivativeInfo { system: sys.name().to_string(), what: "time partial" })
        }
    }
}

/// `ẍ = ∂f/∂t + J f` along the flow through `(t, x)`.
pub fn eval_second_derivative(
    sys: &dyn OdeSystem,
    t: f64,
    x: &DVector<f64>,
    policy: DerivativePolicy,
) -> Result<DVector<f64>> {
    let f = eval_f(sys, t, x)?;
    let jac = jacobian(sys, t, x, policy)?;
    let dt = time_partial(sys, t, x, policy)?;
    Ok(dt + jac * f)
}

/// Uniform knotpoints `t_n = t_start + n·step`, `n = 0..count`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeGrid {
    pub t_start: f64,
    pub step: f64,
    pub count: usize,
}

impl TimeGrid {
    pub fn new(t_start: f64, step: f64, count: usize) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(OdexError::invalid("step", format!("must be > 0, got {step}")));
        }
        if count == 0 {
            return Err(OdexError::invalid("count", "grid needs at least one knotpoint"));
        }
        if !t_start.is_finite() {
            return Err(OdexError::invalid("t_start", "must be finite"));
        }
        Ok(TimeGrid { t_start, step, count })
    }

    /// Grid covering `[t_start, t_end]` with step `step`; the span must be a
    /// whole number of steps (to 1e-9 relative).
    pub fn from_span(t_start: f64, t_end: f64, step: f64) -> Result<Self> {
        if !(t_end > t_start) {
            return Err(OdexError::invalid("t_end", format!("span [{t_start}, {t_end}] is not increasing")));
        }
        if !(step > 0.0) {
            return Err(OdexError::invalid("step", format!("must be > 0, got {step}")));
        }
        let steps = (t_end - t_start) / step;
        let rounded = steps.round();
        if (steps - rounded).abs() > 1e-9 * steps.max(1.0) {
            return Err(OdexError::invalid(
                "step",
                format!("span {} is not a whole number of steps of {step}", t_end - t_start),
            ));
        }
        TimeGrid::new(t_start, step, rounded as usize + 1)
    }

    pub fn t(&self, n: usize) -> f64 {
        self.t_start + n as f64 * self.step
    }

    pub fn t_end(&self) -> f64 {
        self.t(self.count - 1)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.count).map(|n| self.t(n)).collect()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Nearest knotpoint index to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        let n = ((t - self.t_start) / self.step).round().max(0.0) as usize;
        n.min(self.count - 1)
    }
}

/// States at every knotpoint; row `n` is `x(t_n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: DMatrix<f64>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, states: DMatrix<f64>) -> Result<Self> {
        if states.nrows() != grid.count {
            return Err(OdexError::DimensionMismatch { expected: grid.count, found: states.nrows() });
        }
        Ok(Trajectory { grid, states })
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn state(&self, n: usize) -> DVector<f64> {
        self.states.row(n).transpose()
    }

    /// Samples `sys.exact` on `grid`, if the system has one.
    pub fn exact(sys: &dyn OdeSystem, grid: TimeGrid) -> Option<Self> {
        let mut states = DMatrix::zeros(grid.count, sys.dim());
        for n in 0..grid.count {
            states.set_row(n, &sys.exact(grid.t(n))?.transpose());
        }
        Some(Trajectory { grid, states })
    }
}

/// Forcing term `φ(t)` of a linear system.
#[derive(Clone)]
pub enum Forcing {
    Constant(DVector<f64>),
    Function(Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>),
}

impl std::fmt::Debug for Forcing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Forcing::Constant(v) => f.debug_tuple("Constant").field(&v.as_slice()).finish(),
            Forcing::Function(_) => f.write_str("Function(..)"),
        }
    }
}

impl Forcing {
    pub fn zero(dim: usize) -> Self {
        Forcing::Constant(DVector::zeros(dim))
    }

    pub fn eval(&self, t: f64) -> DVector<f64> {
        match self {
            Forcing::Constant(v) => v.clone(),
            Forcing::Function(f) => f(t),
        }
    }

    /// `φ'(t)`; central differences for general forcing functions.
    pub fn derivative(&self, t: f64) -> DVector<f64> {
        match self {
            Forcing::Constant(v) => DVector::zeros(v.len()),
            Forcing::Function(f) => {
                let h = fd_step(t);
                (f(t + h) - f(t - h)) / (2.0 * h)
            }
        }
    }
}

/// `ẋ = L x − φ(t) + ε(t)` with white noise `ε` of the given variance.
#[derive(Clone, Debug)]
pub struct LinearOdeModel {
    pub matrix: DMatrix<f64>,
    pub forcing: Forcing,
    pub noise_variance: f64,
}

impl LinearOdeModel {
    pub fn new(matrix: DMatrix<f64>, forcing: Forcing, noise_variance: f64) -> Result<Self> {
        if !matrix.is_square() {
            return Err(OdexError::DimensionMismatch { expected: matrix.nrows(), found: matrix.ncols() });
        }
        if let Forcing::Constant(v) = &forcing {
            if v.len() != matrix.nrows() {
                return Err(OdexError::DimensionMismatch { expected: matrix.nrows(), found: v.len() });
            }
        }
        if !(noise_variance >= 0.0) {
            return Err(OdexError::invalid("noise_variance", format!("must be >= 0, got {noise_variance}")));
        }
        Ok(LinearOdeModel { matrix, forcing, noise_variance })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// `ẋ₁ = x₂, ẋ₂ = −x₁ + sin(θt)`, with closed-form solution from `x(0) = (−1, 0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForcedOscillator {
    pub theta: f64,
}

pub fn forced_oscillator(theta: f64) -> Result<ForcedOscillator> {
    if (theta * theta - 1.0).abs() < 1e-9 {
        return Err(OdexError::SingularParameter { name: "theta", value: theta });
    }
    Ok(ForcedOscillator { theta })
}

impl OdeSystem for ForcedOscillator {
    fn name(&self) -> &str {
        "forced_oscillator"
    }
    fn dim(&self) -> usize {
        2
    }
    fn params(&self) -> Vec<f64> {
        vec![self.theta]
    }
    fn rhs(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[1], -x[0] + (self.theta * t).sin()])
    }
    fn jacobian(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]))
    }
    fn time_partial(&self, t: f64, _x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(DVector::from_vec(vec![0.0, self.theta * (self.theta * t).cos()]))
    }
    fn exact(&self, t: f64) -> Option<DVector<f64>> {
        let th = self.theta;
        let den = th * th - 1.0;
        let x1 = (-th * th * t.cos() + th * t.sin() - (th * t).sin() + t.cos()) / den;
        let x2 = (th * th * t.sin() + th * t.cos() - th * (th * t).cos() - t.sin()) / den;
        Some(DVector::from_vec(vec![x1, x2]))
    }
    fn has_exact(&self) -> bool {
        true
    }
    fn default_initial_state(&self) -> Option<DVector<f64>> {
        self.exact(0.0)
    }
    fn as_linear(&self) -> Option<LinearOdeModel> {
        let theta = self.theta;
        let forcing = Forcing::Function(Arc::new(move |t| DVector::from_vec(vec![0.0, -(theta * t).sin()])));
        Some(LinearOdeModel {
            matrix: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            forcing,
            noise_variance: 0.0,
        })
    }
}

/// `ẋ₁ = x₂, ẋ₂ = −x₁ + θ(1 − x₁²)x₂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VanDerPol {
    pub theta: f64,
}

pub fn van_der_pol(theta: f64) -> VanDerPol {
    VanDerPol { theta }
}

impl OdeSystem for VanDerPol {
    fn name(&self) -> &str {
        "van_der_pol"
    }
    fn dim(&self) -> usize {
        2
    }
    fn params(&self) -> Vec<f64> {
        vec![self.theta]
    }
    fn rhs(&self, _t: f64, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[1], -x[0] + self.theta * (1.0 - x[0] * x[0]) * x[1]])
    }
    fn jacobian(&self, _t: f64, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let th = self.theta;
        Some(DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 1.0, -1.0 - 2.0 * th * x[0] * x[1], th * (1.0 - x[0] * x[0])],
        ))
    }
    fn time_partial(&self, _t: f64, _x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(DVector::zeros(2))
    }
    fn default_initial_state(&self) -> Option<DVector<f64>> {
        Some(DVector::from_vec(vec![2.0, 0.0]))
    }
}

/// `ẋ = L x − φ(t)`. An exact solution is available once an initial state
/// is attached and `φ` is constant.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub model: LinearOdeModel,
    initial: Option<(f64, DVector<f64>)>,
}

pub fn linear_system(matrix: DMatrix<f64>, forcing: Forcing) -> Result<LinearSystem> {
    Ok(LinearSystem { model: LinearOdeModel::new(matrix, forcing, 0.0)?, initial: None })
}

impl LinearSystem {
    /// Attaches `x(t0) = x0`, enabling [`OdeSystem::exact`] for constant forcing.
    pub fn with_initial_state(mut self, t0: f64, x0: DVector<f64>) -> Result<Self> {
        if x0.len() != self.model.dim() {
            return Err(OdexError::DimensionMismatch { expected: self.model.dim(), found: x0.len() });
        }
        self.initial = Some((t0, x0));
        Ok(self)
    }
}

impl OdeSystem for LinearSystem {
    fn name(&self) -> &str {
        "linear"
    }
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn params(&self) -> Vec<f64> {
        self.model.matrix.iter().copied().collect()
    }
    fn rhs(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        &self.model.matrix * x - self.model.forcing.eval(t)
    }
    fn jacobian(&self, _t: f64, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.model.matrix.clone())
    }
    fn time_partial(&self, t: f64, _x: &DVector<f64>) -> Option<DVector<f64>> {
        Some(-self.model.forcing.derivative(t))
    }
    fn exact(&self, t: f64) -> Option<DVector<f64>> {
        let (t0, x0) = self.initial.as_ref()?;
        let Forcing::Constant(phi) = &self.model.forcing else {
            return None;
        };
        Some(linear_flow(&self.model.matrix, phi, t - t0, x0))
    }
    fn has_exact(&self) -> bool {
        self.initial.is_some() && matches!(self.model.forcing, Forcing::Constant(_))
    }
    fn default_initial_state(&self) -> Option<DVector<f64>> {
        self.initial.as_ref().map(|(_, x)| x.clone())
    }
    fn as_linear(&self) -> Option<LinearOdeModel> {
        Some(self.model.clone())
    }
}

/// Solution of `ẋ = L x − φ` (constant `φ`) after time `dt`, from the
/// exponential of the augmented generator `[[L, −φ], [0, 0]]`.
pub fn linear_flow(l: &DMatrix<f64>, phi: &DVector<f64>, dt: f64, x0: &DVector<f64>) -> DVector<f64> {
    let d = l.nrows();
    let mut gen = DMatrix::zeros(d + 1, d + 1);
    gen.view_mut((0, 0), (d, d)).copy_from(&(l * dt));
    gen.view_mut((0, d), (d, 1)).copy_from(&(-phi * dt));
    let e = expm(&gen);
    let mut z = DVector::zeros(d + 1);
    z.rows_mut(0, d).copy_from(x0);
    z[d] = 1.0;
    (e * z).rows(0, d).into_owned()
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let scaled = a / 2f64.powi(squarings);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &scaled / k as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Closure-backed system for user-defined problems.
pub struct FnSystem<F> {
    name: String,
    dim: usize,
    f: F,
}

impl<F> FnSystem<F>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync,
{
    pub fn new(name: impl Into<String>, dim: usize, f: F) -> Self {
        FnSystem { name: name.into(), dim, f }
    }
}

impl<F> OdeSystem for FnSystem<F>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }
    fn dim(&self) -> usize {
        self.dim
    }
    fn rhs(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        (self.f)(t, x)
    }
}

/// Wraps a system and counts evaluations of `f`.
pub struct Counted<'a> {
    inner: &'a dyn OdeSystem,
    calls: AtomicUsize,
}

impl<'a> Counted<'a> {
    pub fn new(inner: &'a dyn OdeSystem) -> Self {
        Counted { inner, calls: AtomicUsize::new(0) }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl OdeSystem for Counted<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn params(&self) -> Vec<f64> {
        self.inner.params()
    }
    fn rhs(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.rhs(t, x)
    }
    fn jacobian(&self, t: f64, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.inner.jacobian(t, x)
    }
    fn time_partial(&self, t: f64, x: &DVector<f64>) -> Option<DVector<f64>> {
        self.inner.time_partial(t, x)
    }
    fn exact(&self, t: f64) -> Option<DVector<f64>> {
        self.inner.exact(t)
    }
    fn has_exact(&self) -> bool {
        self.inner.has_exact()
    }
    fn default_initial_state(&self) -> Option<DVector<f64>> {
        self.inner.default_initial_state()
    }
    fn as_linear(&self) -> Option<LinearOdeModel> {
        self.inner.as_linear()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn eval_examples() {
        let fo = forced_oscillator(2.0).unwrap();
        assert_eq!(eval_f(&fo, 0.0, &v(&[-1.0, 0.0])).unwrap(), v(&[0.0, 1.0]));
        let vdp = van_der_pol(5.0);
        assert_eq!(eval_f(&vdp, 3.3, &v(&[0.0, 1.0])).unwrap(), v(&[1.0, 5.0]));
        assert_eq!(eval_f(&van_der_pol(0.0), 0.0, &v(&[1.0, 0.0])).unwrap(), v(&[0.0, -1.0]));
        assert_eq!(eval_f(&vdp, 0.0, &v(&[2.0, 1.0])).unwrap(), v(&[1.0, -17.0]));
    }

    #[test]
    fn dimension_mismatch() {
        let vdp = van_der_pol(5.0);
        assert!(matches!(
            eval_f(&vdp, 0.0, &v(&[1.0])),
            Err(OdexError::DimensionMismatch { expected: 2, found: 1 })
        ));
        assert!(linear_system(DMatrix::zeros(2, 3), Forcing::zero(2)).is_err());
    }

    #[test]
    fn second_derivative_examples() {
        let fo = forced_oscillator(2.0).unwrap();
        let a = eval_second_derivative(&fo, 0.0, &v(&[-1.0, 0.0]), DerivativePolicy::AnalyticOnly).unwrap();
        assert_abs_diff_eq!(a, v(&[1.0, 2.0]), epsilon = 1e-15);

        let lin = linear_system(DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 2.0, 0.1]), Forcing::zero(2)).unwrap();
        let a = eval_second_derivative(&lin, 1.0, &v(&[0.0, 0.0]), DerivativePolicy::AnalyticOnly).unwrap();
        assert_eq!(a, v(&[0.0, 0.0]));

        let a = eval_second_derivative(&van_der_pol(0.0), 0.0, &v(&[1.0, 0.0]), DerivativePolicy::AnalyticOnly)
            .unwrap();
        assert_abs_diff_eq!(a, v(&[-1.0, 0.0]), epsilon = 1e-15);
    }

    #[test]
    fn missing_derivatives_need_fallback() {
        let sys = FnSystem::new("sq", 1, |_t, x: &DVector<f64>| x.map(|v| v * v));
        let x = v(&[0.5]);
        assert!(matches!(
            eval_second_derivative(&sys, 0.0, &x, DerivativePolicy::AnalyticOnly),
            Err(OdexError::MissingDerivativeInfo { .. })
        ));
        // ẍ = 2x·x² = 2x³
        let a = eval_second_derivative(&sys, 0.0, &x, DerivativePolicy::AllowFiniteDifference).unwrap();
        assert_abs_diff_eq!(a[0], 0.25, epsilon = 1e-8);
    }

    #[test]
    fn forced_oscillator_exact() {
        let fo = forced_oscillator(2.0).unwrap();
        assert_abs_diff_eq!(fo.exact(0.0).unwrap(), v(&[-1.0, 0.0]), epsilon = 1e-15);
        let h = 1e-5;
        for t in [0.5, 1.7, 3.1] {
            let d = (fo.exact(t + h).unwrap() - fo.exact(t - h).unwrap()) / (2.0 * h);
            let f = fo.rhs(t, &fo.exact(t).unwrap());
            assert!((d - f).amax() <= 1e-8);
        }
        assert!(matches!(forced_oscillator(1.0), Err(OdexError::SingularParameter { .. })));
        assert!(forced_oscillator(-1.0).is_err());
    }

    #[test]
    fn second_derivative_along_exact_solution() {
        let fo = forced_oscillator(2.0).unwrap();
        let h = 1e-5;
        for t in [0.3, 1.1, 2.9, 6.0, 9.4] {
            let along = |s: f64| fo.rhs(s, &fo.exact(s).unwrap());
            let fd = (along(t + h) - along(t - h)) / (2.0 * h);
            let an = eval_second_derivative(&fo, t, &fo.exact(t).unwrap(), DerivativePolicy::AnalyticOnly).unwrap();
            assert!((&fd - &an).amax() <= 1e-4 * an.amax().max(1.0));
        }
    }

    #[test]
    fn vdp_jacobian_example() {
        let j = van_der_pol(5.0).jacobian(0.0, &v(&[1.0, 1.0])).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -11.0, 0.0]));
    }

    #[test]
    fn linear_exact_solutions() {
        let rot = linear_system(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), Forcing::zero(2))
            .unwrap()
            .with_initial_state(0.0, v(&[1.0, 0.0]))
            .unwrap();
        assert_abs_diff_eq!(rot.exact(PI).unwrap(), v(&[-1.0, 0.0]), epsilon = 1e-12);

        let decay = linear_system(DMatrix::from_element(1, 1, -1.0), Forcing::zero(1))
            .unwrap()
            .with_initial_state(0.0, v(&[1.0]))
            .unwrap();
        assert_abs_diff_eq!(decay.exact(1.0).unwrap()[0], (-1.0f64).exp(), epsilon = 1e-13);

        let zero = linear_system(DMatrix::zeros(2, 2), Forcing::zero(2))
            .unwrap()
            .with_initial_state(0.0, v(&[0.4, -3.0]))
            .unwrap();
        assert_eq!(zero.exact(7.5).unwrap(), v(&[0.4, -3.0]));

        // singular L with constant forcing: ẋ = −φ
        let drift = linear_system(DMatrix::zeros(1, 1), Forcing::Constant(v(&[2.0])))
            .unwrap()
            .with_initial_state(1.0, v(&[0.0]))
            .unwrap();
        assert_abs_diff_eq!(drift.exact(3.0).unwrap()[0], -4.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_from_span() {
        let g = TimeGrid::from_span(0.0, 10.0, 0.25).unwrap();
        assert_eq!(g.count, 41);
        assert_eq!(g.t_end(), 10.0);
        assert!(TimeGrid::from_span(0.0, 1.0, 0.3).is_err());
        assert!(TimeGrid::from_span(1.0, 0.0, 0.1).is_err());
        let times = g.times();
        assert!(times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn counted_counts() {
        let vdp = van_der_pol(1.0);
        let c = Counted::new(&vdp);
        for _ in 0..3 {
            eval_f(&c, 0.0, &v(&[1.0, 1.0])).unwrap();
        }
        assert_eq!(c.count(), 3);
    }

    proptest! {
        #[test]
        fn analytic_jacobians_match_differences(x0 in -2.0f64..2.0, x1 in -2.0f64..2.0, t in -2.0f64..2.0) {
            let x = v(&[x0, x1]);
            let systems: Vec<Box<dyn OdeSystem>> = vec![
                Box::new(forced_oscillator(2.0).unwrap()),
                Box::new(van_der_pol(5.0)),
                Box::new(linear_system(DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 2.0, 0.1]), Forcing::zero(2)).unwrap()),
            ];
            for sys in &systems {
                let an = sys.jacobian(t, &x).unwrap();
                let fd = finite_difference_jacobian(sys.as_ref(), t, &x);
                prop_assert!((&an - &fd).amax() <= 1e-5 * an.amax().max(1.0));
                let tp = sys.time_partial(t, &x).unwrap();
                let tfd = finite_difference_time_partial(sys.as_ref(), t, &x);
                prop_assert!((&tp - &tfd).amax() <= 1e-5 * tp.amax().max(1.0));
            }
        }
    }
}
