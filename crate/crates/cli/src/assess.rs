//! A posteriori quality scores for trajectories produced by any solver.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use odex_core::diagnostics::{estimate_errors, ErrorReport};
use odex_core::gp::KernelConfig;
use odex_core::models::{OdeSystem, TimeGrid, Trajectory};
use serde::Serialize;

use crate::error::CliError;
use crate::output::{render_table, write_file};

/// Relative tolerance when checking that the time column is uniform.
const GRID_TOLERANCE: f64 = 1e-9;

/// Reads a trajectory CSV.
///
/// The first row must be a header with a `t` column. State columns are the
/// `mean_*` columns when present (as written by `odex run`), otherwise every
/// column after `t`. Line numbers in errors are 1-based.
pub fn parse_trajectory(text: &str) -> Result<Trajectory, CliError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_error(1, e.to_string()))?,
        None => return Err(parse_error(1, "empty trajectory file")),
    };
    let t_col = header.iter().position(|h| h == "t").ok_or_else(|| parse_error(1, "header has no `t` column"))?;
    let mut cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("mean_")).map(|(i, _)| i).collect();
    if cols.is_empty() {
        cols = (t_col + 1..header.len()).collect();
    }
    if cols.is_empty() {
        return Err(parse_error(1, "header has no state columns"));
    }

    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, record) in records.enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_error(line, e.to_string()))?;
        let field = |c: usize| -> Result<f64, CliError> {
            let s = record.get(c).ok_or_else(|| parse_error(line, format!("missing column {}", c + 1)))?;
            s.parse().map_err(|_| parse_error(line, format!("`{s}` is not a number")))
        };
        times.push(field(t_col)?);
        for &c in &cols {
            values.push(field(c)?);
        }
    }
    if times.len() < 2 {
        return Err(parse_error(times.len() + 1, "need at least two data rows"));
    }

    let step = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    for (k, &t) in times.iter().enumerate() {
        let expected = times[0] + k as f64 * step;
        if (t - expected).abs() > GRID_TOLERANCE * expected.abs().max(1.0) {
            return Err(parse_error(k + 2, format!("time {t} breaks the uniform grid (expected {expected})")));
        }
    }
    let grid = TimeGrid::new(times[0], step, times.len())?;
    Ok(Trajectory::new(grid, DMatrix::from_row_slice(times.len(), cols.len(), &values))?)
}

fn parse_error(line: usize, reason: impl Into<String>) -> CliError {
    CliError::Parse { line, reason: reason.into() }
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_trajectory(&text)
}

#[derive(Serialize)]
pub struct AssessSummary {
    pub system: String,
    pub knots: usize,
    pub dim: usize,
    pub log_likelihood: f64,
    pub log_likelihood_per_knot: f64,
    pub median_error_variance: Vec<f64>,
}

pub fn assess(sys: &dyn OdeSystem, trajectory: &Trajectory, kernel: &KernelConfig) -> Result<ErrorReport, CliError> {
    Ok(estimate_errors(sys, trajectory, kernel)?)
}

/// Per-knot table: `t, sigma2_i, deriv_mean_i, deriv_var` for knots 2..N.
pub fn render_report(trajectory: &Trajectory, report: &ErrorReport) -> Vec<u8> {
    let d = trajectory.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("sigma2_{i}")));
    header.extend((1..=d).map(|i| format!("deriv_mean_{i}")));
    header.push("deriv_var".to_string());
    let rows: Vec<Vec<f64>> = (0..trajectory.grid.count - 1)
        .map(|k| {
            let mut row = vec![trajectory.grid.t(k + 1)];
            row.extend(report.derivative_error_variance.row(k).iter());
            row.extend(report.derivative_mean.row(k).iter());
            row.push(report.derivative_posterior_variance[k]);
            row
        })
        .collect();
    render_table(&header, &rows)
}

/// `traj.csv` → `traj.assess.csv`.
pub fn default_output(input: &Path) -> PathBuf {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("odex");
    input.with_file_name(format!("{stem}.assess.csv"))
}

/// Writes the per-knot table and a JSON summary next to it.
pub fn write_report(output: &Path, sys: &dyn OdeSystem, trajectory: &Trajectory, report: &ErrorReport) -> Result<PathBuf, CliError> {
    write_file(output, &render_report(trajectory, report))?;
    let summary = AssessSummary {
        system: sys.name().to_string(),
        knots: trajectory.grid.count,
        dim: trajectory.dim(),
        log_likelihood: report.log_likelihood,
        log_likelihood_per_knot: report.log_likelihood_per_knot,
        median_error_variance: report.median_error_variance(),
    };
    let path = crate::output::summary_path(output);
    let mut text = serde_json::to_string_pretty(&summary).expect("plain data serializes");
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok(path)
}
