//! Parameter sweeps: one base scenario, many runs with dotted-key overrides.
//!
//! ```toml
//! base = "baseline.toml"      # path relative to the sweep file, or an inline table
//!
//! [[runs]]
//! name = "slow"
//! set = { "flow.q0" = 5e-4 }
//! ```
//!
//! Each run writes its full output into `<out-dir>/<name>/`; the aggregate
//! goes to `<out-dir>/sweep_summary.csv` in file order.

use std::fs;
use std::path::Path;

use bioreactor_fv::config::{parse_config_unvalidated, ScenarioConfig};
use rayon::prelude::*;
use serde::Deserialize;

use crate::{io_error, run_scenario, write_file, Cli, CliError, EXIT_CHECKS, EXIT_OK};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    #[serde(default)]
    pub base: Option<BaseSpec>,
    #[serde(default)]
    pub runs: Vec<SweepRun>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum BaseSpec {
    Path(String),
    Inline(toml::Table),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRun {
    pub name: String,
    #[serde(default)]
    pub set: toml::Table,
}

/// One row of the sweep summary.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub name: String,
    /// `passed`, `checks-failed`, `config-error` or `solver-error`.
    pub status: &'static str,
    pub effluent_s: f64,
    pub min_margin_b: f64,
    pub min_margin_s: f64,
    pub mass_residual: f64,
    pub message: String,
}

impl SweepRow {
    pub fn passed(&self) -> bool {
        self.status == "passed"
    }
}

/// Flattens nested override tables into `(dotted key, TOML value)` pairs.
fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.to_string())),
        }
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty() && name != "." && name != ".." && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Reads a sweep file and resolves its base scenario.
pub fn load_sweep(path: &Path) -> Result<(ScenarioConfig, Vec<SweepRun>), CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let sweep: SweepFile = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
    let base = match sweep.base {
        None => ScenarioConfig::default(),
        Some(BaseSpec::Path(p)) => {
            let base_path = path.parent().unwrap_or(Path::new(".")).join(p);
            let text = fs::read_to_string(&base_path).map_err(|e| io_error(&base_path, e))?;
            parse_config_unvalidated(&text).map_err(|e| CliError::Config(format!("{}: {e}", base_path.display())))?
        }
        Some(BaseSpec::Inline(t)) => {
            let text = toml::to_string(&t).map_err(|e| CliError::Config(e.to_string()))?;
            parse_config_unvalidated(&text).map_err(|e| CliError::Config(format!("{}: base: {e}", path.display())))?
        }
    };
    let mut seen = std::collections::HashSet::new();
    for run in &sweep.runs {
        if !valid_name(&run.name) {
            return Err(CliError::Config(format!("run name `{}` must use only letters, digits, '-', '_' and '.'", run.name)));
        }
        if !seen.insert(run.name.as_str()) {
            return Err(CliError::Config(format!("run name `{}` appears twice", run.name)));
        }
    }
    Ok((base, sweep.runs))
}

fn run_one(base: &ScenarioConfig, run: &SweepRun, dir: &Path, verbose: bool) -> SweepRow {
    let failed = |status, message: String| SweepRow {
        name: run.name.clone(),
        status,
        effluent_s: f64::NAN,
        min_margin_b: f64::NAN,
        min_margin_s: f64::NAN,
        mass_residual: f64::NAN,
        message,
    };
    let mut overrides = Vec::new();
    flatten("", &run.set, &mut overrides);
    let mut config = base.clone();
    for (key, value) in &overrides {
        match config.with_override(key, value) {
            Ok(c) => config = c,
            Err(e) => return failed("config-error", e.to_string()),
        }
    }
    if let Err(e) = config.validate() {
        return failed("config-error", e.to_string());
    }
    match run_scenario(&config, &dir.join(&run.name), verbose) {
        Ok(outcome) => {
            let report = &outcome.report;
            let message = report.failures().iter().map(|c| c.name).collect::<Vec<_>>().join(" ");
            SweepRow {
                name: run.name.clone(),
                status: if report.passed() { "passed" } else { "checks-failed" },
                effluent_s: outcome.effluent,
                min_margin_b: report.linf.min_margin_b(),
                min_margin_s: report.linf.min_margin_s(),
                mass_residual: report.mass.relative_residual,
                message,
            }
        }
        Err(CliError::Config(m)) => failed("config-error", m),
        Err(CliError::Solver(m)) => failed("solver-error", m),
    }
}

/// Runs all entries, concurrently on `threads` workers, returning rows in
/// file order.
pub fn run_sweep(base: &ScenarioConfig, runs: &[SweepRun], dir: &Path, threads: Option<usize>, verbose: bool) -> Result<Vec<SweepRow>, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| runs.par_iter().map(|run| run_one(base, run, dir, verbose)).collect()))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_summary<W: std::io::Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "name,status,effluent_s,min_margin_b,min_margin_s,mass_residual,passed,message")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{},{}",
            csv_field(&r.name),
            r.status,
            r.effluent_s,
            r.min_margin_b,
            r.min_margin_s,
            r.mass_residual,
            r.passed(),
            csv_field(&r.message)
        )?;
    }
    Ok(())
}

pub(crate) fn sweep_command(cli: &Cli, path: &Path) -> Result<u8, CliError> {
    let (mut base, runs) = load_sweep(path)?;
    if let Some(t) = cli.checks {
        base.checks.theorems = t == crate::Toggle::On;
    }
    fs::create_dir_all(&cli.out_dir).map_err(|e| io_error(&cli.out_dir, e))?;
    let rows = run_sweep(&base, &runs, &cli.out_dir, cli.threads, cli.verbose)?;
    write_file(&cli.out_dir.join("sweep_summary.csv"), |w| write_summary(&rows, w))?;
    for r in rows.iter().filter(|r| !r.passed()) {
        eprintln!("run {} {}: {}", r.name, r.status, r.message);
    }
    Ok(if rows.iter().all(SweepRow::passed) { EXIT_OK } else { EXIT_CHECKS })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_and_quoted_overrides_flatten_alike() {
        let quoted: toml::Table = toml::from_str(r#""flow.q0" = 5e-4"#).unwrap();
        let nested: toml::Table = toml::from_str("flow = { q0 = 5e-4 }").unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        flatten("", &quoted, &mut a);
        flatten("", &nested, &mut b);
        assert_eq!(a, b);
        assert_eq!(a, vec![("flow.q0".to_string(), "0.0005".to_string())]);
    }

    #[test]
    fn run_names_are_path_safe() {
        assert!(valid_name("q-0.5x"));
        assert!(!valid_name("../escape"));
        assert!(!valid_name(""));
        assert!(!valid_name(".."));
    }

    #[test]
    fn summary_quotes_messages() {
        let row = SweepRow {
            name: "a".into(),
            status: "config-error",
            effluent_s: f64::NAN,
            min_margin_b: f64::NAN,
            min_margin_s: f64::NAN,
            mass_residual: f64::NAN,
            message: "bad, \"value\"".into(),
        };
        let mut buf = Vec::new();
        write_summary(&[row], &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().ends_with("false,\"bad, \"\"value\"\"\"\n"));
    }
}
