use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use odex_cli::assess::{assess, default_output, read_trajectory, write_report};
use odex_cli::compare::{compare, parse_member, Oracle};
use odex_cli::config::{parse_overrides, ExperimentConfig, Format, SystemKind};
use odex_cli::experiment::{build_system, run_experiment};
use odex_cli::output::{render_comparison, write_file, write_run};
use odex_cli::CliError;
use odex_core::gp::KernelConfig;

/// Environment variable that replaces the seed of every loaded config.
const SEED_ENV: &str = "ODEX_SEED";

#[derive(Parser)]
#[command(name = "odex", version, about = "Probabilistic ODE solver experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one configuration and write its trajectory and summary.
    Run {
        /// Config file path or preset name (fig1..fig4).
        config: String,
        /// Settings overriding the file, as `--key=value`.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run several configurations on one problem and rank them by RMSE.
    Compare {
        /// Config paths or presets; append `:key=value` pairs to override.
        #[arg(required = true)]
        configs: Vec<String>,
        #[arg(long, default_value = "exact")]
        oracle: String,
        #[arg(long, default_value = "csv")]
        format: String,
        /// Also write the table to this file.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Run the members one after another.
        #[arg(long)]
        sequential: bool,
    },
    /// Score an existing trajectory with the derivative-mismatch estimator.
    Assess {
        #[arg(long)]
        system: String,
        #[arg(long, default_value_t = 0.0)]
        theta: f64,
        /// Matrix for linear systems, rows separated by `;`.
        #[arg(long)]
        matrix: Option<String>,
        #[arg(long)]
        forcing: Option<String>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        lengthscale: f64,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
    },
}

/// Env seed first so explicit command-line overrides still win.
fn with_env_seed(mut overrides: Vec<(String, String)>) -> Vec<(String, String)> {
    if let Ok(seed) = std::env::var(SEED_ENV) {
        overrides.insert(0, ("seed".to_string(), seed));
    }
    overrides
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, overrides } => {
            let overrides = with_env_seed(parse_overrides(&overrides)?);
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            log::debug!("running {cfg:?}");
            let out = run_experiment(&cfg)?;
            let (trajectory, summary) = write_run(&out)?;
            match out.errors {
                Some(e) => println!(
                    "{}: {} rmse={:.3e} max_abs={:.3e} f_evals={}",
                    cfg.name,
                    cfg.method.name(),
                    e.rmse,
                    e.max_abs,
                    out.f_evals
                ),
                None => println!("{}: {} f_evals={}", cfg.name, cfg.method.name(), out.f_evals),
            }
            println!("wrote {} and {}", trajectory.display(), summary.display());
        }
        Command::Compare { configs, oracle, format, output, sequential } => {
            let oracle = Oracle::parse(&oracle)?;
            let format = Format::parse("format", &format)?;
            let members = configs
                .iter()
                .map(|arg| {
                    let (source, overrides) = parse_member(arg)?;
                    ExperimentConfig::load(&source, &with_env_seed(overrides))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let rows = compare(&members, oracle, !sequential)?;
            let table = render_comparison(&rows, format);
            if let Some(path) = output {
                write_file(&path, &table)?;
            }
            print!("{}", String::from_utf8_lossy(&table));
        }
        Command::Assess { system, theta, matrix, forcing, input, output, lengthscale, amplitude } => {
            let kind = SystemKind::parse(&system).ok_or_else(|| CliError::config("system", format!("unknown system `{system}`")))?;
            let mut overrides = vec![
                ("system".to_string(), kind.name().to_string()),
                ("method".to_string(), "rk45".to_string()),
                ("theta".to_string(), theta.to_string()),
            ];
            overrides.extend(matrix.map(|m| ("matrix".to_string(), m)));
            overrides.extend(forcing.map(|f| ("forcing".to_string(), f)));
            let cfg = ExperimentConfig::parse("assess", "", &overrides)?;
            let sys = build_system(&cfg)?;
            let kernel = KernelConfig::new(lengthscale, amplitude)?;
            let trajectory = read_trajectory(&input)?;
            let report = assess(sys.as_ref(), &trajectory, &kernel)?;
            let output = output.unwrap_or_else(|| default_output(&input));
            let summary = write_report(&output, sys.as_ref(), &trajectory, &report)?;
            println!(
                "log_likelihood={:.6e} per_knot={:.6e} median_sigma2={:?}",
                report.log_likelihood,
                report.log_likelihood_per_knot,
                report.median_error_variance()
            );
            println!("wrote {} and {}", output.display(), summary.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
