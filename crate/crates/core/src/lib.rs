//! Gaussian-process probabilistic solvers for ODE initial value problems.
//!
//! The crate is organised bottom-up:
//!
//! - [`gp`]: squared-exponential kernel with analytic derivative blocks,
//!   Gram assembly, jittered Cholesky conditioning and seeded sampling.
//! - [`models`]: the [`OdeSystem`](models::OdeSystem) trait, time grids and
//!   the benchmark problems (forced oscillator, Van der Pol, linear systems).
//! - [`solvers`]: the GP-based solvers (Skilling baseline, explicit
//!   multistep sampler, implicit sampler and moment fixed point, gradient
//!   matching, direct linear-ODE solution).
//! - [`reference`]: Dormand-Prince 5(4) baseline.
//! - [`diagnostics`]: error estimates and likelihood scores for any
//!   proposed solution.
//!
//! Ensemble members are independent and run on the rayon pool when the
//! `parallel` feature is enabled (the default).

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod gp;
pub mod models;
pub mod parallel;
pub mod reference;
pub mod rng;
pub mod solvers;

pub use error::{OdexError, Result};
