//! Classical adaptive Runge-Kutta reference solver (Dormand-Prince 5(4)).

use nalgebra::{DMatrix, DVector};

use crate::error::{OdexError, Result};
use crate::models::{OdeSystem, TimeGrid, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RkConfig {
    pub rtol: f64,
    pub atol: f64,
    pub initial_step: f64,
    pub max_steps: usize,
}

impl Default for RkConfig {
    fn default() -> Self {
        RkConfig { rtol: 1e-6, atol: 1e-9, initial_step: 1e-3, max_steps: 1_000_000 }
    }
}

impl RkConfig {
    /// The tight setting used as an oracle for systems without closed forms.
    pub fn tight() -> Self {
        RkConfig { rtol: 1e-10, atol: 1e-10, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0) {
            return Err(OdexError::invalid("rtol", format!("must be > 0, got {}", self.rtol)));
        }
        if !(self.atol > 0.0) {
            return Err(OdexError::invalid("atol", format!("must be > 0, got {}", self.atol)));
        }
        if !(self.initial_step > 0.0) {
            return Err(OdexError::invalid("initial_step", format!("must be > 0, got {}", self.initial_step)));
        }
        if self.max_steps == 0 {
            return Err(OdexError::invalid("max_steps", "must be positive"));
        }
        Ok(())
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// fifth-order minus embedded fourth-order weights
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;

/// Cubic Hermite interpolant on `[t0, t0 + h]` from end values and slopes.
fn hermite(theta: f64, h: f64, y0: &DVector<f64>, f0: &DVector<f64>, y1: &DVector<f64>, f1: &DVector<f64>) -> DVector<f64> {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let h10 = t3 - 2.0 * t2 + theta;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    // written relative to y0 so a constant solution is reproduced exactly
    y0 + (y1 - y0) * h01 + f0 * (h10 * h) + f1 * (h11 * h)
}

/// Integrates from `x1` at `t_span.0` to `t_span.1` and reports the state
/// at every knotpoint of `output_grid`.
pub fn rk45_solve(
    sys: &dyn OdeSystem,
    x1: &DVector<f64>,
    t_span: (f64, f64),
    cfg: &RkConfig,
    output_grid: &TimeGrid,
) -> Result<Trajectory> {
    cfg.validate()?;
    let d = sys.dim();
    if x1.len() != d {
        return Err(OdexError::DimensionMismatch { expected: d, found: x1.len() });
    }
    let (t0, t_end) = t_span;
    if !(t_end > t0) {
        return Err(OdexError::invalid("t_span", format!("[{t0}, {t_end}] is not increasing")));
    }
    let span = t_end - t0;
    let slack = 1e-12 * span.max(1.0);
    if output_grid.t_start < t0 - slack || output_grid.t_end() > t_end + slack {
        return Err(OdexError::invalid("output_grid", "grid extends outside the integration span"));
    }

    let mut out = DMatrix::zeros(output_grid.count, d);
    let mut next_out = 0usize;
    while next_out < output_grid.count && output_grid.t(next_out) <= t0 + slack {
        out.set_row(next_out, &x1.transpose());
        next_out += 1;
    }

    let mut t = t0;
    let mut y = x1.clone();
    let mut f0 = sys.rhs(t, &y);
    let mut h = cfg.initial_step.min(span);
    let mut steps = 0usize;
    let mut k: Vec<DVector<f64>> = vec![DVector::zeros(d); 7];

    while t < t_end && next_out < output_grid.count {
        if steps >= cfg.max_steps {
            return Err(OdexError::MaxStepsExceeded { t, max_steps: cfg.max_steps });
        }
        if h < 1e-14 * span {
            return Err(OdexError::StepUnderflow { t, h });
        }
        let last = t + h >= t_end - 1e-14 * span;
        if last {
            h = t_end - t;
        }
        k[0] = f0.clone();
        for s in 1..7 {
            let mut ys = y.clone();
            for (j, kj) in k.iter().enumerate().take(s) {
                if A[s][j] != 0.0 {
                    ys.axpy(h * A[s][j], kj, 1.0);
                }
            }
            // the last stage is evaluated at the fifth-order solution (FSAL)
            k[s] = sys.rhs(t + C[s] * h, &ys);
        }
        let mut y_new = y.clone();
        for (j, kj) in k.iter().enumerate().take(6) {
            if A[6][j] != 0.0 {
                y_new.axpy(h * A[6][j], kj, 1.0);
            }
        }
        let f_new = k[6].clone();
        let mut err_sq = 0.0;
        for i in 0..d {
            let e: f64 = (0..7).map(|s| E[s] * k[s][i]).sum::<f64>() * h;
            let sc = cfg.atol + cfg.rtol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / sc).powi(2);
        }
        let err = (err_sq / d as f64).sqrt();
        steps += 1;
        if !err.is_finite() {
            h *= FAC_MIN;
            continue;
        }

        let fac11 = err.powf(0.2 - BETA * 0.75);
        if err <= 1.0 {
            let t_new = if last { t_end } else { t + h };
            while next_out < output_grid.count && output_grid.t(next_out) <= t_new + slack {
                let theta = ((output_grid.t(next_out) - t) / h).clamp(0.0, 1.0);
                let x = hermite(theta, h, &y, &f0, &y_new, &f_new);
                out.set_row(next_out, &x.transpose());
                next_out += 1;
            }
            let fac_old = err.max(1e-4);
            let fac = (fac11 / fac_old.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            t = t_new;
            y = y_new;
            f0 = f_new;
            h /= fac;
        } else {
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
        }
    }
    // Grid points at t_end that survived the slack comparison.
    while next_out < output_grid.count {
        out.set_row(next_out, &y.transpose());
        next_out += 1;
    }
    Trajectory::new(*output_grid, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{forced_oscillator, linear_system, Forcing};
    use std::f64::consts::PI;

    fn rotation() -> crate::models::LinearSystem {
        linear_system(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]), Forcing::zero(2)).unwrap()
    }

    #[test]
    fn harmonic_oscillator_half_period() {
        let sys = rotation();
        let grid = TimeGrid::new(0.0, PI / 8.0, 9).unwrap();
        let cfg = RkConfig { rtol: 1e-10, atol: 1e-10, ..Default::default() };
        let sol = rk45_solve(&sys, &DVector::from_vec(vec![1.0, 0.0]), (0.0, PI), &cfg, &grid).unwrap();
        for n in 0..grid.count {
            let t = grid.t(n);
            assert!((sol.states[(n, 0)] - t.cos()).abs() < 1e-8);
            assert!((sol.states[(n, 1)] + t.sin()).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_field_is_exactly_constant() {
        let sys = linear_system(DMatrix::zeros(2, 2), Forcing::zero(2)).unwrap();
        let x1 = DVector::from_vec(vec![0.123, -4.5]);
        let grid = TimeGrid::from_span(0.0, 3.0, 0.1).unwrap();
        let sol = rk45_solve(&sys, &x1, (0.0, 3.0), &RkConfig::default(), &grid).unwrap();
        for n in 0..grid.count {
            assert_eq!(sol.state(n), x1);
        }
    }

    #[test]
    fn forced_oscillator_tight() {
        let sys = forced_oscillator(2.0).unwrap();
        let grid = TimeGrid::from_span(0.0, 10.0, 0.25).unwrap();
        let sol = rk45_solve(&sys, &sys.exact(0.0).unwrap(), (0.0, 10.0), &RkConfig::tight(), &grid).unwrap();
        let exact = Trajectory::exact(&sys, grid).unwrap();
        assert!((sol.states - exact.states).amax() <= 1e-7);
    }

    #[test]
    fn tighter_tolerance_is_more_accurate() {
        let sys = forced_oscillator(2.0).unwrap();
        let grid = TimeGrid::from_span(0.0, 10.0, 0.25).unwrap();
        let exact = Trajectory::exact(&sys, grid).unwrap();
        let x1 = sys.exact(0.0).unwrap();
        let mut prev = f64::INFINITY;
        for tol in [1e-4, 1e-6, 1e-8] {
            let cfg = RkConfig { rtol: tol, atol: tol, ..Default::default() };
            let sol = rk45_solve(&sys, &x1, (0.0, 10.0), &cfg, &grid).unwrap();
            let err = (&sol.states - &exact.states).amax();
            assert!(err < prev, "tol {tol}: {err} !< {prev}");
            prev = err;
        }
    }

    #[test]
    fn max_steps_and_bad_config() {
        let sys = forced_oscillator(2.0).unwrap();
        let grid = TimeGrid::from_span(0.0, 10.0, 0.25).unwrap();
        let x1 = sys.exact(0.0).unwrap();
        let cfg = RkConfig { max_steps: 3, ..RkConfig::tight() };
        assert!(matches!(
            rk45_solve(&sys, &x1, (0.0, 10.0), &cfg, &grid),
            Err(OdexError::MaxStepsExceeded { .. })
        ));
        let cfg = RkConfig { rtol: 0.0, ..Default::default() };
        assert!(rk45_solve(&sys, &x1, (0.0, 10.0), &cfg, &grid).is_err());
        assert!(rk45_solve(&sys, &x1, (0.0, 5.0), &RkConfig::default(), &grid).is_err());
    }
}
