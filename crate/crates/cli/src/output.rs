//! Trajectory, summary and comparison files.
//!
//! Floats are written with 17 significant digits so every value survives a
//! round trip, rows end in `\n`, and nothing depends on the locale.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Format;
use crate::error::CliError;
use crate::experiment::RunOutcome;

pub fn float(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e))
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn trajectory_header(d: usize, with_reference: bool) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((1..=d).map(|i| format!("mean_{i}")));
    h.extend((1..=d).map(|i| format!("std_{i}")));
    if with_reference {
        h.extend((1..=d).map(|i| format!("exact_{i}")));
        h.extend((1..=d).map(|i| format!("err_{i}")));
    }
    h
}

#[derive(Serialize)]
struct TrajectoryJson<'a> {
    columns: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference: Option<&'a str>,
    rows: Vec<Vec<f64>>,
}

fn trajectory_rows(out: &RunOutcome) -> Vec<Vec<f64>> {
    let d = out.mean.ncols();
    (0..out.grid.count)
        .map(|n| {
            let mut row = vec![out.grid.t(n)];
            row.extend((0..d).map(|i| out.mean[(n, i)]));
            row.extend((0..d).map(|i| out.std[(n, i)]));
            if let Some((_, r)) = &out.reference {
                row.extend((0..d).map(|i| r.states[(n, i)]));
                row.extend((0..d).map(|i| out.mean[(n, i)] - r.states[(n, i)]));
            }
            row
        })
        .collect()
}

pub fn render_trajectory(out: &RunOutcome, format: Format) -> Result<Vec<u8>, CliError> {
    let header = trajectory_header(out.mean.ncols(), out.reference.is_some());
    let rows = trajectory_rows(out);
    match format {
        Format::Csv => {
            let mut w = csv_writer(Vec::new());
            let path = out.config.output_path();
            w.write_record(&header).map_err(|e| csv_error(&path, e))?;
            for row in rows {
                w.write_record(row.into_iter().map(float)).map_err(|e| csv_error(&path, e))?;
            }
            w.into_inner().map_err(|e| CliError::io(&path, e.into_error()))
        }
        Format::Json => {
            let doc = TrajectoryJson { columns: header, reference: out.reference.as_ref().map(|(n, _)| *n), rows };
            let mut s = serde_json::to_string_pretty(&doc).expect("plain data serializes");
            s.push('\n');
            Ok(s.into_bytes())
        }
    }
}

#[derive(Serialize)]
pub struct Summary {
    pub name: String,
    pub system: String,
    pub method: String,
    pub theta: f64,
    pub knots: usize,
    pub dim: usize,
    pub step: f64,
    pub window: usize,
    pub samples: usize,
    pub seed: u64,
    pub reference: Option<String>,
    pub rmse: Option<f64>,
    pub max_abs_error: Option<f64>,
    pub f_evals: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl Summary {
    pub fn new(out: &RunOutcome) -> Self {
        let c = &out.config;
        Summary {
            name: c.name.clone(),
            system: c.system.name().to_string(),
            method: c.method.name().to_string(),
            theta: c.theta,
            knots: out.grid.count,
            dim: out.mean.ncols(),
            step: c.step,
            window: c.window,
            samples: c.samples,
            seed: c.seed,
            reference: out.reference.as_ref().map(|(n, _)| n.to_string()),
            rmse: out.errors.map(|e| e.rmse),
            max_abs_error: out.errors.map(|e| e.max_abs),
            f_evals: out.f_evals,
            // Timing is opt-in so repeated runs stay byte-identical.
            wall_time_s: c.timing.then_some(out.wall_time.as_secs_f64()),
        }
    }
}

/// `runs/fig2.csv` → `runs/fig2.summary.json`.
pub fn summary_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("odex");
    output.with_file_name(format!("{stem}.summary.json"))
}

pub fn write_run(out: &RunOutcome) -> Result<(PathBuf, PathBuf), CliError> {
    let path = out.config.output_path();
    write_file(&path, &render_trajectory(out, out.config.format)?)?;
    let summary = summary_path(&path);
    let mut text = serde_json::to_string_pretty(&Summary::new(out)).expect("plain data serializes");
    text.push('\n');
    write_file(&summary, text.as_bytes())?;
    Ok((path, summary))
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub name: String,
    pub method: String,
    pub rmse: f64,
    pub max_abs_error: f64,
    pub f_evals: usize,
    pub wall_time_s: f64,
}

pub fn render_comparison(rows: &[CompareRow], format: Format) -> Vec<u8> {
    match format {
        Format::Csv => {
            let mut w = csv_writer(Vec::new());
            w.write_record(["name", "method", "rmse", "max_abs_error", "f_evals", "wall_time_s"]).expect("in-memory write");
            for r in rows {
                w.write_record([r.name.clone(), r.method.clone(), float(r.rmse), float(r.max_abs_error), r.f_evals.to_string(), float(r.wall_time_s)])
                    .expect("in-memory write");
            }
            w.into_inner().expect("in-memory write")
        }
        Format::Json => {
            let mut s = serde_json::to_string_pretty(rows).expect("plain data serializes");
            s.push('\n');
            s.into_bytes()
        }
    }
}

/// Writes a header plus numeric rows as CSV.
pub fn render_table(header: &[String], rows: &[Vec<f64>]) -> Vec<u8> {
    let mut w = csv_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row.iter().map(|&x| float(x))).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}
