//! Squared-exponential Gaussian process machinery.
//!
//! Observations and queries are *sites*: a time paired with a derivative
//! order. Covariances between derivatives of the process are obtained by
//! differentiating the kernel analytically, so value, first-derivative and
//! second-derivative observations can be mixed freely in one Gram matrix.
//!
//! All linear algebra goes through a jittered Cholesky factorization; no
//! matrix is ever inverted explicitly.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{OdexError, Result};

/// Relative jitter applied before the first factorization attempt.
pub const JITTER_START: f64 = 1e-10;
/// Largest relative jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Squared-exponential covariance `σ_f² exp(-(t-t')²/ℓ²)`.
///
/// The default (`ℓ = 1`, `σ_f² = 1`) is `exp(-(t-t')²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelConfig {
    pub lengthscale: f64,
    pub amplitude: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { lengthscale: 1.0, amplitude: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DerivOrder {
    Value = 0,
    FirstDeriv = 1,
    SecondDeriv = 2,
}

impl DerivOrder {
    pub fn as_usize(self) -> usize {
        self as usize
    }
}

impl KernelConfig {
    pub fn new(lengthscale: f64, amplitude: f64) -> Result<Self> {
        let cfg = KernelConfig { lengthscale, amplitude };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(OdexError::invalid("lengthscale", format!("must be > 0, got {}", self.lengthscale)));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(OdexError::invalid("amplitude", format!("must be > 0, got {}", self.amplitude)));
        }
        Ok(())
    }

    /// `∂ᵃ/∂tᵃ ∂ᵇ/∂t'ᵇ k(t, t')`.
    ///
    /// With `r = t - t'` the kernel is a function `g(r)`, so the mixed
    /// derivative is `(-1)ᵇ g⁽ᵃ⁺ᵇ⁾(r)`.
    pub fn eval(&self, t: f64, t_prime: f64, left: DerivOrder, right: DerivOrder) -> f64 {
        let n = left.as_usize() + right.as_usize();
        let sign = if right.as_usize().is_multiple_of(2) { 1.0 } else { -1.0 };
        sign * self.radial_derivative(t - t_prime, n)
    }

    /// n-th derivative of `g(r) = σ_f² exp(-c r²)`, `c = 1/ℓ²`, for n ≤ 4.
    fn radial_derivative(&self, r: f64, n: usize) -> f64 {
        let c = 1.0 / (self.lengthscale * self.lengthscale);
        let g = self.amplitude * (-c * r * r).exp();
        let r2 = r * r;
        let poly = match n {
            0 => 1.0,
            1 => -2.0 * c * r,
            2 => 4.0 * c * c * r2 - 2.0 * c,
            3 => -8.0 * c * c * c * r2 * r + 12.0 * c * c * r,
            4 => 16.0 * c.powi(4) * r2 * r2 - 48.0 * c.powi(3) * r2 + 12.0 * c * c,
            _ => unreachable!("kernel derivatives above total order 4 are not needed"),
        };
        poly * g
    }
}

/// Free-function form of [`KernelConfig::eval`].
pub fn kernel_eval(cfg: &KernelConfig, t: f64, t_prime: f64, left: DerivOrder, right: DerivOrder) -> f64 {
    cfg.eval(t, t_prime, left, right)
}

/// A time paired with the derivative order observed or queried there.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Site {
    pub t: f64,
    pub order: DerivOrder,
}

impl Site {
    pub fn new(t: f64, order: DerivOrder) -> Self {
        Site { t, order }
    }
    pub fn value(t: f64) -> Self {
        Site { t, order: DerivOrder::Value }
    }
    pub fn deriv(t: f64) -> Self {
        Site { t, order: DerivOrder::FirstDeriv }
    }
    pub fn second(t: f64) -> Self {
        Site { t, order: DerivOrder::SecondDeriv }
    }
}

impl From<(f64, DerivOrder)> for Site {
    fn from((t, order): (f64, DerivOrder)) -> Self {
        Site { t, order }
    }
}

pub fn build_gram(cfg: &KernelConfig, rows: &[Site], cols: &[Site]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| {
        cfg.eval(rows[i].t, cols[j].t, rows[i].order, cols[j].order)
    })
}

/// Symmetric Gram matrix of a single site list. Only the lower triangle is
/// evaluated and mirrored, so the result is exactly symmetric.
pub fn build_gram_symmetric(cfg: &KernelConfig, sites: &[Site]) -> DMatrix<f64> {
    let n = sites.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = cfg.eval(sites[i].t, sites[j].t, sites[i].order, sites[j].order);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub t: f64,
    pub order: DerivOrder,
    pub value: f64,
    pub noise_variance: f64,
}

/// Typed scalar observations of one GP.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObservationSet {
    entries: Vec<Observation>,
}

impl ObservationSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, t: f64, order: DerivOrder, value: f64, noise_variance: f64) -> Result<()> {
        if !(noise_variance >= 0.0) {
            return Err(OdexError::invalid("noise_variance", format!("must be >= 0, got {noise_variance}")));
        }
        self.entries.push(Observation { t, order, value, noise_variance });
        Ok(())
    }

    pub fn with(mut self, t: f64, order: DerivOrder, value: f64, noise_variance: f64) -> Result<Self> {
        self.push(t, order, value, noise_variance)?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Observation] {
        &self.entries
    }

    pub fn sites(&self) -> Vec<Site> {
        self.entries.iter().map(|o| Site::new(o.t, o.order)).collect()
    }

    pub fn values(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.entries.iter().map(|o| o.value))
    }

    pub fn noises(&self) -> Vec<f64> {
        self.entries.iter().map(|o| o.noise_variance).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(OdexError::DimensionMismatch { expected: mean.len(), found: covariance.nrows() });
        }
        Ok(GaussianBelief { mean, covariance: symmetrize(covariance) })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal variance, clamped at zero against rounding.
    pub fn variance(&self, i: usize) -> f64 {
        self.covariance[(i, i)].max(0.0)
    }

    pub fn std(&self, i: usize) -> f64 {
        self.variance(i).sqrt()
    }
}

pub(crate) fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows().min(m.ncols());
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Cholesky factor of `a + jitter·I`, escalating the jitter by ×10 from
/// `JITTER_START` to `JITTER_MAX`, both relative to the largest diagonal entry.
#[derive(Clone, Debug)]
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl JitteredCholesky {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0_f64, f64::max).max(1e-300);
        let mut rel = JITTER_START;
        loop {
            let jitter = rel * scale;
            let mut m = a.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if m.iter().all(|v| v.is_finite()) {
                if let Some(factor) = Cholesky::new(m) {
                    return Ok(JitteredCholesky { factor, jitter });
                }
            }
            if rel >= JITTER_MAX * (1.0 - 1e-9) {
                return Err(OdexError::SingularGram { size: n, jitter });
            }
            rel = (rel * 10.0).min(JITTER_MAX);
        }
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.factor.l()
    }

    /// `log det(a + jitter·I)`.
    pub fn log_det(&self) -> f64 {
        let l = self.factor.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }
}

/// Posterior of a set of query sites as an affine map of the observation
/// values: `mean = weights · y`, covariance independent of `y`.
///
/// Since the posterior covariance of a GP depends only on where and how
/// noisily it was observed, one predictor serves every state dimension that
/// shares the observation layout.
#[derive(Clone, Debug)]
pub struct LinearPredictor {
    pub weights: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub jitter: f64,
}

impl LinearPredictor {
    pub fn new(cfg: &KernelConfig, sites: &[Site], noise: &[f64], queries: &[Site]) -> Result<Self> {
        if sites.len() != noise.len() {
            return Err(OdexError::DimensionMismatch { expected: sites.len(), found: noise.len() });
        }
        let prior = build_gram_symmetric(cfg, queries);
        if sites.is_empty() {
            return Ok(LinearPredictor {
                weights: DMatrix::zeros(queries.len(), 0),
                covariance: prior,
                jitter: 0.0,
            });
        }
        let mut kyy = build_gram_symmetric(cfg, sites);
        for (i, s2) in noise.iter().enumerate() {
            kyy[(i, i)] += s2;
        }
        let chol = JitteredCholesky::new(&kyy)?;
        let kyq = build_gram(cfg, sites, queries);
        let solved = chol.solve(&kyq);
        let weights = solved.transpose();
        let covariance = symmetrize(prior - &weights * &kyq);
        Ok(LinearPredictor { weights, covariance, jitter: chol.jitter })
    }

    pub fn mean(&self, values: &DVector<f64>) -> DVector<f64> {
        &self.weights * values
    }

    pub fn belief(&self, values: &DVector<f64>) -> GaussianBelief {
        GaussianBelief { mean: self.mean(values), covariance: self.covariance.clone() }
    }

    pub fn variance(&self, i: usize) -> f64 {
        self.covariance[(i, i)].max(0.0)
    }
}

/// Zero-prior-mean Gaussian conditioning of `queries` on `observations`.
pub fn condition(cfg: &KernelConfig, observations: &ObservationSet, queries: &[Site]) -> Result<GaussianBelief> {
    if queries.is_empty() {
        return Err(OdexError::invalid("queries", "query list must be non-empty"));
    }
    let predictor = LinearPredictor::new(cfg, &observations.sites(), &observations.noises(), queries)?;
    Ok(predictor.belief(&observations.values()))
}

/// Lower-triangular-like factor `F` with `F Fᵀ ≈ Σ`, used to draw samples.
///
/// Tries the jittered Cholesky first. Posterior covariances formed by
/// subtraction can carry rounding-level negative eigenvalues far below the
/// jitter scale of their (tiny) diagonal; those fall back to a symmetric
/// eigendecomposition with negative eigenvalues clipped to zero.
pub fn sampling_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match JitteredCholesky::new(cov) {
        Ok(c) => Ok(c.l()),
        Err(err) => {
            if !cov.iter().all(|v| v.is_finite()) {
                return Err(err);
            }
            let eig = nalgebra::SymmetricEigen::new(symmetrize(cov.clone()));
            let mut f = eig.eigenvectors.clone();
            for (j, lambda) in eig.eigenvalues.iter().enumerate() {
                let s = lambda.max(0.0).sqrt();
                f.column_mut(j).scale_mut(s);
            }
            Ok(f)
        }
    }
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draws `mean + F z` with `z ~ N(0, I)` taken from `rng`.
pub fn sample_with<R: Rng + ?Sized>(belief: &GaussianBelief, rng: &mut R) -> Result<DVector<f64>> {
    let f = sampling_factor(&belief.covariance)?;
    let z = standard_normal_vector(belief.dim(), rng);
    Ok(&belief.mean + f * z)
}

/// Seeded draw from `belief`; identical inputs give bit-identical output.
pub fn sample(belief: &GaussianBelief, seed: u64) -> Result<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_with(belief, &mut rng)
}
