//! Scenario configuration: a TOML document with one table per concern.
//!
//! Every key is optional. A document containing only `horizon = 500.0` is a
//! valid scenario; omitted keys take the values of [`ScenarioConfig::default`].
//!
//! ```toml
//! horizon = 2000.0            # T [s]
//!
//! [mesh]
//! mode = "axial1d"            # or "axisymmetric2d"
//! length = 1.0                # L [m]
//! radius = 0.1                # R [m]
//! n_axial = 32
//! n_radial = 1
//!
//! [transport]
//! d_s = 1e-4                  # [m²/s]
//! d_b = 1e-4                  # [m²/s]
//! scheme = "upwind"           # or "central"
//! strict_flow = true          # reject negative Q
//!
//! [flow]
//! profile = "constant"        # "time_ramp", "axially_varying"
//! q0 = 1e-3                   # [m/s]
//!
//! [inlet]
//! times = [0.0]               # [s]
//! values = [1.0]              # S_e [mol/m³]
//!
//! [initial]
//! s = 0.0                     # uniform value or per-cell list [mol/m³]
//! b = 0.1
//!
//! [kinetics]
//! kind = "monod"              # "haldane", "capped_linear", "zero"
//! mu_max = 1e-3               # [1/s]
//! k_s = 0.5                   # [mol/m³]
//!
//! [solver]
//! dt = 20.0                   # [s]
//! nonlinear_mode = "per_step_picard"   # or "schauder_global"
//! reaction_coupling = "exponential_fit" # or "implicit"
//!
//! [checks]
//! theorems = true
//!
//! [output]
//! snapshots = 10
//! ```

use serde::{Deserialize, Serialize};

use crate::discretization::{AssemblyOptions, FlowField, InletSchedule, Scheme};
use crate::geometry::{MeshError, MeshSpec};
use crate::kinetics::{GrowthRateModel, KineticsError};
use crate::timestepping::SolverOptions;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid `{field}`: {constraint}")]
    Invalid { field: String, constraint: String },
}

impl ConfigError {
    pub(crate) fn invalid(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        ConfigError::Invalid { field: field.into(), constraint: constraint.into() }
    }

    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { field, .. } => Some(field),
            ConfigError::Parse { .. } => None,
        }
    }
}

/// Initial concentration, either one value for every cell or one per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialField {
    Uniform(f64),
    PerCell(Vec<f64>),
}

impl InitialField {
    pub fn values(&self, n_cells: usize) -> Vec<f64> {
        match self {
            InitialField::Uniform(v) => vec![*v; n_cells],
            InitialField::PerCell(v) => v.clone(),
        }
    }

    pub fn sup_abs(&self) -> f64 {
        match self {
            InitialField::Uniform(v) => v.abs(),
            InitialField::PerCell(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    fn min(&self) -> f64 {
        match self {
            InitialField::Uniform(v) => *v,
            InitialField::PerCell(v) => v.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    fn check(&self, field: &str, n_cells: usize) -> Result<(), ConfigError> {
        match self {
            InitialField::Uniform(v) if !v.is_finite() => Err(ConfigError::invalid(field, "must be finite")),
            InitialField::PerCell(v) if v.len() != n_cells => {
                Err(ConfigError::invalid(field, format!("per-cell list has {} entries, mesh has {n_cells} cells", v.len())))
            }
            InitialField::PerCell(v) if v.iter().any(|x| !x.is_finite()) => Err(ConfigError::invalid(field, "must be finite")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub d_s: f64,
    pub d_b: f64,
    pub scheme: Scheme,
    pub strict_flow: bool,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { d_s: 1e-4, d_b: 1e-4, scheme: Scheme::Upwind, strict_flow: true }
    }
}

impl TransportConfig {
    pub fn assembly(&self) -> AssemblyOptions {
        AssemblyOptions { scheme: self.scheme, strict_flow: self.strict_flow }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    pub s: InitialField,
    pub b: InitialField,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self { s: InitialField::Uniform(0.0), b: InitialField::Uniform(0.1) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChecksConfig {
    /// Require the sign hypotheses on the data and assert the invariants.
    pub theorems: bool,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        Self { theorems: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Number of evenly spaced interior snapshot times; `t = 0` and `t = T`
    /// are always written.
    pub snapshots: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { snapshots: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Final time `T` [s].
    pub horizon: f64,
    pub mesh: MeshSpec,
    pub transport: TransportConfig,
    pub flow: FlowField,
    pub inlet: InletSchedule,
    pub initial: InitialConfig,
    pub kinetics: GrowthRateModel,
    pub solver: SolverOptions,
    pub checks: ChecksConfig,
    pub output: OutputConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            horizon: 2000.0,
            mesh: MeshSpec::default(),
            transport: TransportConfig::default(),
            flow: FlowField::default(),
            inlet: InletSchedule::default(),
            initial: InitialConfig::default(),
            kinetics: GrowthRateModel::monod(1e-3, 0.5),
            solver: SolverOptions::default(),
            checks: ChecksConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn mesh_error(e: MeshError) -> ConfigError {
    match e {
        MeshError::InvalidSpec { field, constraint } => ConfigError::invalid(format!("mesh.{field}"), constraint),
    }
}

fn kinetics_error(e: KineticsError) -> ConfigError {
    match e {
        KineticsError::InvalidParameter { name, .. } => {
            ConfigError::invalid(format!("kinetics.{name}"), "growth-rate parameters must be positive and finite")
        }
        other => ConfigError::invalid("kinetics", other.to_string()),
    }
}

impl ScenarioConfig {
    /// Full validation, including `T > 0`.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(ConfigError::invalid("horizon", "final time T must be positive and finite"));
        }
        self.validate_allowing_zero_horizon()
    }

    /// Validation that also admits `T = 0`, for which a simulation returns
    /// only the initial state.
    pub fn validate_allowing_zero_horizon(&self) -> Result<(), ConfigError> {
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(ConfigError::invalid("horizon", "final time T must be nonnegative and finite"));
        }
        self.mesh.validate().map_err(mesh_error)?;
        let diffusion = "must be positive: diffusion coefficients D_S, D_B > 0 are required for existence";
        for (name, d) in [("transport.d_s", self.transport.d_s), ("transport.d_b", self.transport.d_b)] {
            if !(d.is_finite() && d > 0.0) {
                return Err(ConfigError::invalid(name, diffusion));
            }
        }
        self.flow.validate().map_err(|e| ConfigError::invalid("flow", e.to_string()))?;
        if self.transport.strict_flow && self.flow.sup_negative_part(self.horizon) > 0.0 {
            return Err(ConfigError::invalid("flow", "flow rate Q must be nonnegative (set transport.strict_flow = false to allow)"));
        }
        self.inlet.validate().map_err(|e| ConfigError::invalid("inlet", e.to_string()))?;
        self.kinetics.validate().map_err(kinetics_error)?;
        let n = self.mesh.n_cells();
        self.initial.s.check("initial.s", n)?;
        self.initial.b.check("initial.b", n)?;
        self.solver.validate(self.kinetics.sup())?;
        if self.checks.theorems {
            let sign = "must be nonnegative when theorem checks are on (nonnegative initial and inlet data)";
            if self.initial.s.min() < 0.0 {
                return Err(ConfigError::invalid("initial.s", sign));
            }
            if self.initial.b.min() < 0.0 {
                return Err(ConfigError::invalid("initial.b", sign));
            }
            if self.inlet.values.iter().any(|v| *v < 0.0) {
                return Err(ConfigError::invalid("inlet.values", sign));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario configs are always representable in TOML")
    }

    /// Applies a dotted-key override such as `flow.q0 = 2e-3`, with the value
    /// written as a TOML expression.
    pub fn with_override(&self, key: &str, value: &str) -> Result<ScenarioConfig, ConfigError> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("round trip of serialized config");
        let parsed: toml::Table = toml::from_str(&format!("v = {value}")).map_err(|e| ConfigError::Parse {
            line: 1,
            column: 1,
            message: format!("override `{key}`: {}", e.message()),
        })?;
        let v = parsed["v"].clone();
        let mut table = &mut doc;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            table = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| ConfigError::invalid(key, "override path crosses a non-table value"))?;
        }
        table.insert(parts[parts.len() - 1].to_string(), v);
        parse_config(&toml::to_string(&doc).expect("table serializes"))
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Parses and fully validates a scenario document.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigError> {
    let config = parse_config_unvalidated(text)?;
    config.validate()?;
    Ok(config)
}

/// Parses a scenario document, checking only its syntax and keys. Callers
/// that adjust the result must run [`ScenarioConfig::validate`] themselves.
pub fn parse_config_unvalidated(text: &str) -> Result<ScenarioConfig, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
        ConfigError::Parse { line, column, message: e.message().to_string() }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MeshMode;
    use crate::timestepping::{NonlinearMode, ReactionCoupling};
    use proptest::prelude::*;

    #[test]
    fn minimal_document_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, ScenarioConfig::default());
        assert_eq!(c.horizon, 2000.0);
        assert_eq!(c.mesh.n_axial, 32);
        assert_eq!(c.transport.d_s, 1e-4);
        assert_eq!(c.solver.dt, 20.0);
        assert_eq!(c.solver.picard_damping, 1.0);
        assert_eq!(c.solver.nonlinear_mode, NonlinearMode::PerStepPicard);
        assert_eq!(c.output.snapshots, 10);
        assert!(c.checks.theorems);
    }

    #[test]
    fn zero_diffusion_is_rejected() {
        let e = parse_config("[transport]\nd_s = 0.0\n").unwrap_err();
        assert_eq!(e.field(), Some("transport.d_s"));
        assert!(e.to_string().contains("D_S, D_B > 0"));
    }

    #[test]
    fn large_step_is_rejected() {
        let doc = "[kinetics]\nkind = \"monod\"\nmu_max = 0.075\nk_s = 1.0\n[solver]\ndt = 20.0\n";
        let e = parse_config(doc).unwrap_err();
        assert_eq!(e.field(), Some("solver.dt"));
        assert!(e.to_string().contains("dt * mu_sup"));
        assert!(e.to_string().contains("positivity"));
    }

    #[test]
    fn nonpositive_horizon_is_rejected() {
        assert_eq!(parse_config("horizon = 0.0").unwrap_err().field(), Some("horizon"));
        let mut c = ScenarioConfig::default();
        c.horizon = 0.0;
        assert!(c.validate_allowing_zero_horizon().is_ok());
    }

    #[test]
    fn parse_errors_carry_positions() {
        match parse_config("horizon = 1.0\n[mesh]\nn_axial = \"x\"\n").unwrap_err() {
            ConfigError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_config("[mesh]\nbogus = 1\n").unwrap_err() {
            ConfigError::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("bogus"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn field_paths_for_nested_errors() {
        assert_eq!(parse_config("[mesh]\nn_axial = 1\n").unwrap_err().field(), Some("mesh.n_axial"));
        assert_eq!(parse_config("[kinetics]\nkind = \"monod\"\nmu_max = -1.0\nk_s = 1.0\n").unwrap_err().field(), Some("kinetics.mu_max"));
        assert_eq!(parse_config("[initial]\ns = -1.0\n").unwrap_err().field(), Some("initial.s"));
        assert!(parse_config("[initial]\ns = -1.0\n[checks]\ntheorems = false\n").is_ok());
        assert_eq!(parse_config("[initial]\nb = [1.0, 2.0]\n").unwrap_err().field(), Some("initial.b"));
        assert_eq!(parse_config("[flow]\nprofile = \"constant\"\nq0 = -1.0\n").unwrap_err().field(), Some("flow"));
        assert_eq!(parse_config("[solver]\npicard_damping = 0.0\n").unwrap_err().field(), Some("solver.picard_damping"));
    }

    #[test]
    fn per_cell_initial_data() {
        let doc = "[mesh]\nn_axial = 3\n[initial]\ns = [0.0, 1, 2.5]\nb = 0\n";
        let c = parse_config(doc).unwrap();
        assert_eq!(c.initial.s, InitialField::PerCell(vec![0.0, 1.0, 2.5]));
        assert_eq!(c.initial.b.values(3), vec![0.0; 3]);
    }

    #[test]
    fn overrides() {
        let c = ScenarioConfig::default().with_override("flow.q0", "2e-3").unwrap();
        assert_eq!(c.flow, FlowField::constant(2e-3));
        let c = c.with_override("mesh.n_axial", "8").unwrap();
        assert_eq!(c.mesh.n_axial, 8);
        assert!(c.with_override("transport.d_b", "0.0").is_err());
    }

    fn arb_config() -> impl Strategy<Value = ScenarioConfig> {
        (
            (0.1f64..10.0, 0.01f64..2.0, 2usize..40, 1usize..6, any::<bool>()),
            (1e-6f64..1e-2, 1e-6f64..1e-2, any::<bool>()),
            (0.0f64..1e-2, 0.0f64..1e-2, 1.0f64..100.0, 0usize..3),
            proptest::collection::vec(0.0f64..5.0, 1..5),
            (1e-4f64..1e-2, 0.01f64..5.0, 1.0f64..20.0, 0usize..4),
            (1.0f64..1e4, 0.1f64..10.0, any::<bool>(), any::<bool>()),
        )
            .prop_map(|(m, tr, fl, inlet_vals, kin, misc)| {
                let mut c = ScenarioConfig::default();
                c.mesh = if m.4 {
                    MeshSpec { mode: MeshMode::Axisymmetric2D, length: m.0, radius: m.1, n_axial: m.2, n_radial: m.3 }
                } else {
                    MeshSpec::axial(m.0, m.1, m.2)
                };
                c.transport = TransportConfig { d_s: tr.0, d_b: tr.1, scheme: if tr.2 { Scheme::Central } else { Scheme::Upwind }, strict_flow: true };
                c.flow = match fl.3 {
                    0 => FlowField::constant(fl.0),
                    1 => FlowField::TimeRamp { q0: fl.0, q1: fl.1, ramp_time: fl.2 },
                    _ => FlowField::AxiallyVarying { z: vec![0.0, m.0], t: vec![0.0], values: vec![vec![fl.0, fl.1]] },
                };
                let times = (0..inlet_vals.len()).map(|i| i as f64 * 10.0).collect();
                c.inlet = InletSchedule { times, values: inlet_vals };
                c.kinetics = match kin.3 {
                    0 => GrowthRateModel::monod(kin.0, kin.1),
                    1 => GrowthRateModel::haldane(kin.0, kin.1, kin.2),
                    2 => GrowthRateModel::capped_linear(kin.0, kin.0 * kin.1),
                    _ => GrowthRateModel::Zero,
                };
                c.horizon = misc.0;
                c.solver.dt = misc.1;
                c.solver.nonlinear_mode = if misc.2 { NonlinearMode::SchauderGlobal } else { NonlinearMode::PerStepPicard };
                c.solver.reaction_coupling = if misc.3 { ReactionCoupling::Implicit } else { ReactionCoupling::ExponentialFit };
                c.initial.s = InitialField::PerCell((0..c.mesh.n_cells()).map(|i| 0.1 * i as f64).collect());
                c
            })
    }

    proptest! {
        #[test]
        fn serialization_round_trips(c in arb_config()) {
            prop_assume!(c.validate().is_ok());
            let text = c.to_toml();
            prop_assert_eq!(parse_config(&text).unwrap(), c);
        }
    }
}
