//! Finite-volume simulation of a diluted substrate and the biomass that
//! consumes it, transported through a tubular reactor with Danckwerts
//! inlet/outlet conditions.
//!
//! The modules build on each other in this order:
//! [`kinetics`] → [`geometry`] → [`discretization`] → [`timestepping`] →
//! [`analysis`] and [`verification`]. [`config`] holds the scenario format
//! and [`io`] the CSV layouts.
//!
//! ```
//! use bioreactor_fv::{config::parse_config, timestepping::simulate};
//!
//! let config = parse_config("horizon = 200.0\n[mesh]\nn_axial = 10\n").unwrap();
//! let (trajectory, report) = simulate(&config).unwrap();
//! assert_eq!(trajectory.n_steps(), 10);
//! assert!(report.passed());
//! ```

pub mod analysis;
pub mod config;
pub mod discretization;
pub mod geometry;
pub mod io;
pub mod kinetics;
pub mod linalg;
pub mod timestepping;
pub mod verification;

pub use analysis::{diagnose, DiagnosticsReport};
pub use config::{parse_config, ConfigError, ScenarioConfig};
pub use timestepping::{simulate, Model, SimulationError, SolverOptions, State, Trajectory};

/// Any failure raised by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Verification(#[from] verification::VerificationError),
    #[error(transparent)]
    Trajectory(#[from] io::TrajectoryReadError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/discretization.md")]
    mod discretization {}
    #[doc = include_str!("../../../book/src/time-stepping.md")]
    mod time_stepping {}
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    mod diagnostics {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
