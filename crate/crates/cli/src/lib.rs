//! Command-line front end: single runs, parameter sweeps, manufactured-solution
//! studies and re-checking of stored trajectories.
//!
//! Exit status: [`EXIT_OK`], [`EXIT_CONFIG`], [`EXIT_CHECKS`] or [`EXIT_SOLVER`].

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bioreactor_fv::analysis::{diagnose, effluent_substrate, CheckStatus, DiagnosticsReport};
use bioreactor_fv::config::{parse_config_unvalidated, ConfigError, ScenarioConfig};
use bioreactor_fv::io::{fields_file_name, read_trajectory, snapshot_indices, write_fields, write_trajectory};
use bioreactor_fv::timestepping::{simulate, Model, SimulationError, Trajectory};
use bioreactor_fv::verification::standard_studies;
use clap::{Parser, Subcommand, ValueEnum};

pub mod sweep;

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_CHECKS: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "bioreactor", version, about = "Finite-volume substrate/biomass reactor simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Directory receiving all output files.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Progress on standard error and per-iteration residuals in `residuals.csv`.
    #[arg(long, global = true)]
    pub verbose: bool,
    /// Overrides `checks.theorems` of the scenario.
    #[arg(long, global = true, value_enum)]
    pub checks: Option<Toggle>,
    /// Worker threads for sweeps (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulates one scenario and writes fields, diagnostics and a summary.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Runs every entry of a sweep file and writes `sweep_summary.csv`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Runs the manufactured-solution convergence studies.
    Mms,
    /// Re-runs diagnostics on `trajectory.csv` in the output directory.
    Check {
        /// Scenario of the stored run (default: `config.toml` in the output directory).
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// A failure that ends a command, carrying its exit status.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Solver(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Solver(_) => EXIT_SOLVER,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Solver(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(format!("invalid configuration: {e}"))
    }
}

impl From<SimulationError> for CliError {
    fn from(e: SimulationError) -> Self {
        match e {
            SimulationError::Config(c) => c.into(),
            SimulationError::Mesh(m) => CliError::Config(format!("invalid mesh: {m}")),
            other => CliError::Solver(format!("solver failure: {other}")),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

/// Reads and validates a scenario file, applying the `--checks` override
/// before validation.
pub fn load_config(path: &Path, checks: Option<Toggle>) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut config = parse_config_unvalidated(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(t) = checks {
        config.checks.theorems = t == Toggle::On;
    }
    config.validate().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(config)
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    let mut out = BufWriter::new(file);
    f(&mut out).and_then(|_| out.flush()).map_err(|e| io_error(path, e))
}

/// What a completed run produced.
#[derive(Debug)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub report: DiagnosticsReport,
    /// Outlet-averaged substrate at the final time [mol/m³].
    pub effluent: f64,
}

fn summary_text(config: &ScenarioConfig, outcome: &RunOutcome) -> String {
    let traj = &outcome.trajectory;
    let mut s = format!(
        "cells: {}\nsteps: {} (dt = {:e})\nfinal time: {:e}\neffluent S: {:e}\nresult: {}\n",
        config.mesh.n_cells(),
        traj.n_steps(),
        traj.dt,
        traj.final_state().t,
        outcome.effluent,
        if outcome.report.passed() { "PASS" } else { "FAIL" }
    );
    s.push_str(&outcome.report.summary());
    s
}

fn write_report(dir: &Path, config: &ScenarioConfig, outcome: &RunOutcome) -> Result<(), CliError> {
    write_file(&dir.join("diagnostics.csv"), |w| outcome.report.write_csv(w))?;
    let text = summary_text(config, outcome);
    write_file(&dir.join("summary.txt"), |w| w.write_all(text.as_bytes()))
}

/// Simulates `config` and writes every output file into `dir`.
pub fn run_scenario(config: &ScenarioConfig, dir: &Path, verbose: bool) -> Result<RunOutcome, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    write_file(&dir.join("config.toml"), |w| w.write_all(config.to_toml().as_bytes()))?;
    if verbose {
        eprintln!("simulating {} cells to T = {:e}", config.mesh.n_cells(), config.horizon);
    }
    let (trajectory, report) = simulate(config)?;
    let model = Model::from_config(config).map_err(|e| CliError::Config(e.to_string()))?;
    let effluent = effluent_substrate(&model.mesh, trajectory.final_state());
    for n in snapshot_indices(trajectory.n_steps(), config.output.snapshots) {
        let state = &trajectory.states[n];
        write_file(&dir.join(fields_file_name(state.t)), |w| write_fields(&model.mesh, state, w))?;
    }
    write_file(&dir.join("trajectory.csv"), |w| write_trajectory(&trajectory, w))?;
    if verbose {
        write_file(&dir.join("residuals.csv"), |w| {
            writeln!(w, "step,t,iteration,update")?;
            for (n, info) in trajectory.steps.iter().enumerate() {
                for (k, u) in info.picard_history.iter().enumerate() {
                    writeln!(w, "{},{:e},{},{:e}", n + 1, info.t, k + 1, u)?;
                }
            }
            Ok(())
        })?;
    }
    let outcome = RunOutcome { trajectory, report, effluent };
    write_report(dir, config, &outcome)?;
    Ok(outcome)
}

fn report_failures(report: &DiagnosticsReport) {
    for c in report.failures() {
        if let CheckStatus::Failed(why) = &c.status {
            eprintln!("check failed: {} ({}): {why}", c.name, c.property);
        }
    }
}

fn run_command(cli: &Cli, config_path: &Path) -> Result<u8, CliError> {
    let config = load_config(config_path, cli.checks)?;
    let outcome = run_scenario(&config, &cli.out_dir, cli.verbose)?;
    if cli.verbose {
        eprint!("{}", summary_text(&config, &outcome));
    }
    if outcome.report.passed() {
        Ok(EXIT_OK)
    } else {
        report_failures(&outcome.report);
        Ok(EXIT_CHECKS)
    }
}

fn check_command(cli: &Cli, config_path: Option<&Path>) -> Result<u8, CliError> {
    let default = cli.out_dir.join("config.toml");
    let config = load_config(config_path.unwrap_or(&default), cli.checks)?;
    let model = Model::from_config(&config).map_err(|e| CliError::Config(e.to_string()))?;
    let path = cli.out_dir.join("trajectory.csv");
    let text = fs::read_to_string(&path).map_err(|e| io_error(&path, e))?;
    let trajectory = read_trajectory(&text, model.mesh.n_cells()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let report = diagnose(&model, &config, &trajectory);
    let effluent = effluent_substrate(&model.mesh, trajectory.final_state());
    let outcome = RunOutcome { trajectory, report, effluent };
    write_report(&cli.out_dir, &config, &outcome)?;
    print!("{}", outcome.report.summary());
    if outcome.report.passed() {
        Ok(EXIT_OK)
    } else {
        report_failures(&outcome.report);
        Ok(EXIT_CHECKS)
    }
}

fn mms_command(cli: &Cli) -> Result<u8, CliError> {
    fs::create_dir_all(&cli.out_dir).map_err(|e| io_error(&cli.out_dir, e))?;
    let studies = standard_studies().map_err(|e| CliError::Solver(e.to_string()))?;
    let mut all = true;
    for (study, expectation) in &studies {
        write_file(&cli.out_dir.join(format!("mms_{}.csv", study.case)), |w| study.write_csv(w))?;
        let met = expectation.met_by(study);
        all &= met;
        println!(
            "{:<20} order {:.3} (expected {expectation:?}){} {}",
            study.case,
            study.order,
            if study.conclusive() { "" } else { " inconclusive" },
            if met { "PASS" } else { "FAIL" }
        );
    }
    Ok(if all { EXIT_OK } else { EXIT_CHECKS })
}

/// Executes a parsed command line and returns the process exit status.
pub fn execute(cli: &Cli) -> u8 {
    let result = match &cli.command {
        Command::Run { config } => run_command(cli, config),
        Command::Sweep { config } => sweep::sweep_command(cli, config),
        Command::Mms => mms_command(cli),
        Command::Check { config } => check_command(cli, config.as_deref()),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {}", e.message());
        e.exit_code()
    })
}
