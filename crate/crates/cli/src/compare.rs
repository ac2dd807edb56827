//! Side-by-side runs of several configurations against one oracle.

use odex_core::parallel::try_map_indexed;

use crate::config::{ExperimentConfig, Reference};
use crate::error::CliError;
use crate::experiment::{build_system, grid, initial_state, run_experiment};
use crate::output::CompareRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Oracle {
    Exact,
    Rk45,
}

impl Oracle {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "exact" => Ok(Oracle::Exact),
            "rk45" | "rk45_tight" => Ok(Oracle::Rk45),
            other => Err(CliError::config("oracle", format!("expected exact or rk45, got `{other}`"))),
        }
    }
}

/// Splits `fig3:method=explicit:window=1` into a source and its overrides.
pub fn parse_member(arg: &str) -> Result<(String, Vec<(String, String)>), CliError> {
    let mut parts = arg.split(':');
    let source = parts.next().unwrap_or_default().to_string();
    let overrides = parts
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::config("compare", format!("member override `{kv}` must look like key=value")))
        })
        .collect::<Result<_, _>>()?;
    Ok((source, overrides))
}

/// All members must describe the same problem on the same grid.
fn check_shared_problem(configs: &[ExperimentConfig]) -> Result<(), CliError> {
    let first = &configs[0];
    let sys = build_system(first)?;
    let x0 = initial_state(first, sys.as_ref())?;
    let g = grid(first)?;
    for c in &configs[1..] {
        if c.system != first.system || c.theta != first.theta || c.matrix != first.matrix || c.forcing != first.forcing {
            return Err(CliError::config("system", format!("`{}` and `{}` describe different systems", first.name, c.name)));
        }
        let other = initial_state(c, build_system(c)?.as_ref())?;
        if other != x0 {
            return Err(CliError::config("x0", format!("`{}` and `{}` start from different states", first.name, c.name)));
        }
        if grid(c)? != g {
            return Err(CliError::config("grid", format!("`{}` and `{}` use different output grids", first.name, c.name)));
        }
    }
    Ok(())
}

/// Runs every member against `oracle` and returns rows sorted by RMSE.
///
/// Members may run concurrently; each run is deterministic on its own and the
/// rows are sorted afterwards, so the table does not depend on scheduling.
pub fn compare(configs: &[ExperimentConfig], oracle: Oracle, parallel: bool) -> Result<Vec<CompareRow>, CliError> {
    if configs.is_empty() {
        return Err(CliError::config("configs", "at least one configuration is required"));
    }
    check_shared_problem(configs)?;
    let reference = match oracle {
        Oracle::Exact => Reference::Exact,
        Oracle::Rk45 => Reference::Rk45,
    };
    let mut rows = try_map_indexed(configs.len(), parallel, |i| {
        let mut cfg = configs[i].clone();
        cfg.reference = reference;
        let out = run_experiment(&cfg)?;
        let errors = out.errors.expect("an oracle is always requested");
        Ok::<_, CliError>(CompareRow {
            name: cfg.name.clone(),
            method: cfg.method.name().to_string(),
            rmse: errors.rmse,
            max_abs_error: errors.max_abs,
            f_evals: out.f_evals,
            wall_time_s: out.wall_time.as_secs_f64(),
        })
    })?;
    rows.sort_by(|a, b| a.rmse.total_cmp(&b.rmse).then_with(|| a.name.cmp(&b.name)));
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(src: &str) -> ExperimentConfig {
        let (s, o) = parse_member(src).unwrap();
        ExperimentConfig::load(&s, &o).unwrap()
    }

    #[test]
    fn member_overrides() {
        let (s, o) = parse_member("fig3:method=explicit:window=1").unwrap();
        assert_eq!(s, "fig3");
        assert_eq!(o, vec![("method".into(), "explicit".into()), ("window".into(), "1".into())]);
        assert!(parse_member("fig3:window").is_err());
    }

    #[test]
    fn single_member_is_one_row() {
        let rows = compare(&[load("fig2:t_end=2")], Oracle::Exact, false).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].method, "explicit");
    }

    #[test]
    fn mismatched_grids_rejected() {
        let err = compare(&[load("fig1"), load("fig2:step=0.125")], Oracle::Exact, false).unwrap_err();
        assert!(matches!(err, CliError::Config { ref field, .. } if field == "grid"), "{err}");
        let err = compare(&[load("fig1"), load("fig3")], Oracle::Rk45, false).unwrap_err();
        assert!(matches!(err, CliError::Config { ref field, .. } if field == "system"), "{err}");
    }

    #[test]
    fn ordering_independent_of_execution() {
        let members = [load("fig1"), load("fig2")];
        let seq = compare(&members, Oracle::Exact, false).unwrap();
        let par = compare(&[members[1].clone(), members[0].clone()], Oracle::Exact, true).unwrap();
        let key = |r: &[CompareRow]| r.iter().map(|r| (r.name.clone(), r.rmse, r.f_evals)).collect::<Vec<_>>();
        assert_eq!(key(&seq), key(&par));
        assert_eq!(seq[0].method, "explicit");
    }
}
