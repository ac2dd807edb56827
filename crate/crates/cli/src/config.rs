//! Flat `key = value` experiment files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Command-line overrides use the same keys (`--key=value`) and are applied
//! after the file. Unknown keys are rejected so typos surface immediately.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::error::CliError;

const PRESETS: [(&str, &str); 4] = [
    ("fig1", include_str!("../presets/fig1.cfg")),
    ("fig2", include_str!("../presets/fig2.cfg")),
    ("fig3", include_str!("../presets/fig3.cfg")),
    ("fig4", include_str!("../presets/fig4.cfg")),
];

pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Skilling,
    Explicit,
    ImplicitSample,
    ImplicitMoment,
    GradientMatch,
    LinearGp,
    Rk45,
}

impl Method {
    pub const ALL: [(&'static str, Method); 7] = [
        ("skilling", Method::Skilling),
        ("explicit", Method::Explicit),
        ("implicit_sample", Method::ImplicitSample),
        ("implicit_moment", Method::ImplicitMoment),
        ("gradient_match", Method::GradientMatch),
        ("linear_gp", Method::LinearGp),
        ("rk45", Method::Rk45),
    ];

    pub fn name(self) -> &'static str {
        Method::ALL.iter().find(|(_, m)| *m == self).map(|(n, _)| *n).expect("every method is listed")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemKind {
    ForcedOscillator,
    VanDerPol,
    Linear,
}

impl SystemKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "forced_oscillator" => Some(SystemKind::ForcedOscillator),
            "van_der_pol" => Some(SystemKind::VanDerPol),
            "linear" => Some(SystemKind::Linear),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::ForcedOscillator => "forced_oscillator",
            SystemKind::VanDerPol => "van_der_pol",
            SystemKind::Linear => "linear",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn parse(field: &'static str, s: &str) -> Result<Self, CliError> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(CliError::config(field, format!("expected csv or json, got `{other}`"))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// Which trajectory errors are measured against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reference {
    /// Closed form if the system has one for this initial state, else tight RK45.
    Auto,
    Exact,
    Rk45,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Label used for default output names.
    pub name: String,
    pub system: SystemKind,
    pub theta: f64,
    pub x0: Option<Vec<f64>>,
    /// Linear systems: row-major `L`.
    pub matrix: Option<DMatrix<f64>>,
    /// Linear systems: constant forcing `φ`.
    pub forcing: Option<Vec<f64>>,
    /// Linear systems: variance of the white-noise term.
    pub noise: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub step: f64,
    pub method: Method,
    pub window: usize,
    pub samples: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub second_derivs: bool,
    pub retain_values: bool,
    pub lengthscale: f64,
    pub amplitude: f64,
    pub seed: u64,
    pub parallel: bool,
    pub rtol: f64,
    pub atol: f64,
    pub reference: Reference,
    pub output: Option<PathBuf>,
    pub format: Format,
    pub timing: bool,
}

const KEYS: [&str; 27] = [
    "system", "theta", "x0", "matrix", "forcing", "noise", "t_start", "t_end", "step", "method", "window", "samples",
    "max_iter", "tol", "second_derivs", "retain_values", "lengthscale", "amplitude", "seed", "parallel", "rtol", "atol",
    "reference", "output", "format", "timing", "name",
];

impl ExperimentConfig {
    /// Defaults for everything except the required keys.
    fn with_defaults(system: SystemKind, method: Method) -> Self {
        ExperimentConfig {
            name: "odex".to_string(),
            system,
            theta: 0.0,
            x0: None,
            matrix: None,
            forcing: None,
            noise: 0.0,
            t_start: 0.0,
            t_end: 10.0,
            step: 0.25,
            method,
            window: 5,
            samples: 20,
            max_iter: 50,
            tol: 1e-8,
            second_derivs: false,
            retain_values: false,
            lengthscale: 1.0,
            amplitude: 1.0,
            seed: 0,
            parallel: true,
            rtol: 1e-6,
            atol: 1e-9,
            reference: Reference::Auto,
            output: None,
            format: Format::Csv,
            timing: false,
        }
    }

    /// Parses a config file body; `line` numbers in errors are 1-based.
    pub fn parse(name: &str, text: &str, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Parse { line: i + 1, reason: format!("expected `key = value`, got `{line}`") });
            };
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        for (k, v) in overrides {
            entries.insert(k.clone(), v.clone());
        }
        for k in entries.keys() {
            if !KEYS.contains(&k.as_str()) {
                return Err(CliError::Config { field: k.clone(), reason: "unknown key".to_string() });
            }
        }

        let get = |k: &str| entries.get(k).map(String::as_str);
        let system = match get("system") {
            Some(s) => SystemKind::parse(s).ok_or_else(|| CliError::config("system", format!("unknown system `{s}`")))?,
            None => return Err(CliError::config("system", "missing")),
        };
        let method = match get("method") {
            Some(s) => Method::ALL
                .iter()
                .find(|(n, _)| *n == s)
                .map(|(_, m)| *m)
                .ok_or_else(|| CliError::config("method", format!("unknown method `{s}`")))?,
            None => return Err(CliError::config("method", "missing")),
        };
        let mut cfg = ExperimentConfig::with_defaults(system, method);
        cfg.name = name.to_string();
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `source`, which is a file path or a preset name.
    pub fn load(source: &str, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let path = Path::new(source);
        if path.is_file() {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("odex");
            return Self::parse(name, &text, overrides);
        }
        match preset(source) {
            Some(text) => Self::parse(source, text, overrides),
            None => Err(CliError::config(
                "config",
                format!("`{source}` is neither a file nor a preset ({})", preset_names().collect::<Vec<_>>().join(", ")),
            )),
        }
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let field = KEYS.iter().copied().find(|k| *k == key).expect("keys are checked before assignment");
        match field {
            "system" | "method" => {}
            "name" => self.name = value.to_string(),
            "theta" => self.theta = number(field, value)?,
            "x0" => self.x0 = Some(list(field, value)?),
            "matrix" => self.matrix = Some(matrix(field, value)?),
            "forcing" => self.forcing = Some(list(field, value)?),
            "noise" => self.noise = number(field, value)?,
            "t_start" => self.t_start = number(field, value)?,
            "t_end" => self.t_end = number(field, value)?,
            "step" => self.step = number(field, value)?,
            "window" => self.window = integer(field, value)?,
            "samples" => self.samples = integer(field, value)?,
            "max_iter" => self.max_iter = integer(field, value)?,
            "tol" => self.tol = number(field, value)?,
            "second_derivs" => self.second_derivs = boolean(field, value)?,
            "retain_values" => self.retain_values = boolean(field, value)?,
            "lengthscale" => self.lengthscale = number(field, value)?,
            "amplitude" => self.amplitude = number(field, value)?,
            "seed" => self.seed = integer(field, value)?,
            "parallel" => self.parallel = boolean(field, value)?,
            "rtol" => self.rtol = number(field, value)?,
            "atol" => self.atol = number(field, value)?,
            "reference" => {
                self.reference = match value {
                    "auto" => Reference::Auto,
                    "exact" => Reference::Exact,
                    "rk45" => Reference::Rk45,
                    "none" => Reference::None,
                    other => return Err(CliError::config(field, format!("expected auto, exact, rk45 or none, got `{other}`"))),
                }
            }
            "output" => self.output = Some(PathBuf::from(value)),
            "format" => self.format = Format::parse(field, value)?,
            "timing" => self.timing = boolean(field, value)?,
            _ => unreachable!("all keys handled"),
        }
        Ok(())
    }

    fn validate(&self) -> Result<(), CliError> {
        if !(self.step > 0.0) {
            return Err(CliError::config("step", "must be > 0"));
        }
        if !(self.t_end > self.t_start) {
            return Err(CliError::config("t_end", "time span must be increasing"));
        }
        for (field, v) in [("lengthscale", self.lengthscale), ("amplitude", self.amplitude), ("tol", self.tol), ("rtol", self.rtol), ("atol", self.atol)] {
            if !(v > 0.0) {
                return Err(CliError::config(field, "must be > 0"));
            }
        }
        if self.noise < 0.0 {
            return Err(CliError::config("noise", "must be >= 0"));
        }
        if self.window == 0 {
            return Err(CliError::config("window", "must be >= 1"));
        }
        if self.samples == 0 {
            return Err(CliError::config("samples", "must be >= 1"));
        }
        if self.system == SystemKind::Linear && self.matrix.is_none() {
            return Err(CliError::config("matrix", "required for linear systems"));
        }
        Ok(())
    }

    /// Where the trajectory file goes.
    pub fn output_path(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from(format!("{}.{}", self.name, self.format.extension())))
    }

    pub fn x0_vector(&self) -> Option<DVector<f64>> {
        self.x0.as_ref().map(|v| DVector::from_column_slice(v))
    }
}

/// Parses `--key=value` style arguments.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    args.iter()
        .map(|a| {
            let body = a.strip_prefix("--").unwrap_or(a);
            body.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| CliError::Config { field: body.to_string(), reason: "override must look like --key=value".to_string() })
        })
        .collect()
}

fn number(field: &'static str, v: &str) -> Result<f64, CliError> {
    let x: f64 = v.parse().map_err(|_| CliError::config(field, format!("`{v}` is not a number")))?;
    if !x.is_finite() {
        return Err(CliError::config(field, "must be finite"));
    }
    Ok(x)
}

fn integer<T: std::str::FromStr>(field: &'static str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| CliError::config(field, format!("`{v}` is not a non-negative integer")))
}

fn boolean(field: &'static str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::config(field, format!("`{v}` is not a boolean"))),
    }
}

fn list(field: &'static str, v: &str) -> Result<Vec<f64>, CliError> {
    v.split(',').map(|x| number(field, x.trim())).collect()
}

/// `a,b;c,d` → 2×2 row-major.
fn matrix(field: &'static str, v: &str) -> Result<DMatrix<f64>, CliError> {
    let rows: Vec<Vec<f64>> = v.split(';').map(|r| list(field, r)).collect::<Result<_, _>>()?;
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(CliError::config(field, "matrix must be square, rows separated by `;`"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for name in preset_names() {
            let cfg = ExperimentConfig::load(name, &[]).unwrap();
            assert_eq!(cfg.name, name);
        }
        let fig2 = ExperimentConfig::load("fig2", &[]).unwrap();
        assert_eq!((fig2.method, fig2.step, fig2.theta), (Method::Explicit, 0.25, 2.0));
    }

    #[test]
    fn unknown_method_names_the_field() {
        let err = ExperimentConfig::load("fig2", &[("method".into(), "euler".into())]).unwrap_err();
        assert!(matches!(&err, CliError::Config { field, .. } if field == "method"), "{err}");
    }

    #[test]
    fn overrides_and_comments() {
        let text = "system = van_der_pol  # comment\nmethod = rk45\n\ntheta = 1.5\nx0 = 1, 0\n";
        let cfg = ExperimentConfig::parse("t", text, &parse_overrides(&["--theta=3".into()]).unwrap()).unwrap();
        assert_eq!(cfg.theta, 3.0);
        assert_eq!(cfg.x0, Some(vec![1.0, 0.0]));
    }

    #[test]
    fn bad_values_name_their_field() {
        let base = "system = linear\nmethod = linear_gp\n";
        let cases = [
            ("matrix = 1,2;3", "matrix"),
            ("matrix = 1\nstep = -1", "step"),
            ("matrix = 1\nwindow = x", "window"),
            ("matrix = 1\nbogus = 1", "bogus"),
            ("matrix = 1\nformat = xml", "format"),
            ("", "matrix"),
        ];
        for (extra, expected) in cases {
            let err = ExperimentConfig::parse("t", &format!("{base}{extra}\n"), &[]).unwrap_err();
            assert!(matches!(&err, CliError::Config { field, .. } if field == expected), "{extra}: {err}");
        }
        let err = ExperimentConfig::parse("t", "system forced_oscillator\n", &[]).unwrap_err();
        assert!(matches!(err, CliError::Parse { line: 1, .. }));
    }
}
