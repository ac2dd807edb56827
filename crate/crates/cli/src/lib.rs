//! Experiment runner behind the `odex` binary: flat-file configs, solver
//! dispatch, comparison tables and a posteriori error assessment.

// Validation uses `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assess;
pub mod compare;
pub mod config;
pub mod error;
pub mod experiment;
pub mod output;

pub use config::ExperimentConfig;
pub use error::CliError;
