//! Implicit Euler time integration of the coupled substrate/biomass system.
//!
//! A step from `t^n` to `t^{n+1} = t^n + dt` with a frozen reaction
//! coefficient `c` solves
//!
//! ```text
//! (I - dt L_S) S^{n+1} + dt c B^{n+1} = S^n + dt src_S
//! (I - dt L_B - dt c) B^{n+1}         = B^n
//! ```
//!
//! with operators and inlet data evaluated at `t^{n+1}`. The block system is
//! upper triangular, so `B^{n+1}` is solved first.
//!
//! Two nonlinear strategies close the loop `c = μ(S)`:
//!
//! * [`step_nonlinear`] iterates on each step (Picard), starting from `S^n`;
//! * [`solve_schauder_global`] iterates on whole trajectories: freeze
//!   `c = μ(Z)` over all of `[0, T]`, sweep linear steps to obtain `S_Z`,
//!   and repeat with `Z = S_Z`.
//!
//! Within the nonlinear strategies, [`ReactionCoupling`] controls how `μ`
//! becomes the step coefficient `c`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::analysis::{diagnose, DiagnosticsReport};
use crate::config::{ConfigError, ScenarioConfig};
use crate::discretization::{assemble_transport, AssemblyError, AssemblyOptions, FlowField, InletSchedule};
use crate::geometry::{build_mesh, Mesh, MeshError};
use crate::kinetics::{GrowthRateModel, KineticsError};
use crate::linalg::{CsrMatrix, LinearSolveError, LinearSolverOptions, PreparedSystem, SolveInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NonlinearMode {
    #[default]
    PerStepPicard,
    SchauderGlobal,
}

/// How the growth rate `μ(Z)` enters a step as the coefficient `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReactionCoupling {
    /// `c = μ(Z)`. The single-cell growth factor is `1 / (1 - dt μ)`, which
    /// exceeds `exp(μ dt)`.
    Implicit,
    /// `c = (1 - exp(-μ(Z) dt)) / dt`. The single-cell growth factor is
    /// exactly `exp(μ dt)`, so the discrete biomass never outgrows
    /// `||B_init|| exp(sup μ t)`. Still first order, `c = μ + O(dt)`.
    #[default]
    ExponentialFit,
}

impl ReactionCoupling {
    pub fn coefficient(self, mu: f64, dt: f64) -> f64 {
        match self {
            ReactionCoupling::Implicit => mu,
            ReactionCoupling::ExponentialFit => -(-mu * dt).exp_m1() / dt,
        }
    }

    /// `coefficient(μ(z), dt) / z`, given `μ(z)` and the specific rate
    /// `μ(z) / z`; finite at `z = 0`.
    pub fn specific_coefficient(self, mu: f64, specific_rate: f64, dt: f64) -> f64 {
        match self {
            ReactionCoupling::Implicit => specific_rate,
            ReactionCoupling::ExponentialFit => {
                let x = mu * dt;
                let phi = if x > 0.0 { -(-x).exp_m1() / x } else { 1.0 };
                phi * specific_rate
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    /// Requested step [s]; the run uses `T / ceil(T / dt)`.
    pub dt: f64,
    pub linear_tol: f64,
    pub linear_max_iter: usize,
    /// Relative volume-weighted L² update that ends a fixed-point iteration.
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    /// Relaxation `ω` in `Z <- Z + ω (S - Z)`; 1 is the plain fixed-point
    /// map. Per-step iterations use it as the Anderson mixing parameter.
    pub picard_damping: f64,
    pub nonlinear_mode: NonlinearMode,
    pub reaction_coupling: ReactionCoupling,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            dt: 20.0,
            linear_tol: 1e-10,
            linear_max_iter: 1000,
            picard_tol: 1e-10,
            picard_max_iter: 200,
            picard_damping: 1.0,
            nonlinear_mode: NonlinearMode::PerStepPicard,
            reaction_coupling: ReactionCoupling::ExponentialFit,
        }
    }
}

impl SolverOptions {
    pub fn linear(&self) -> LinearSolverOptions {
        LinearSolverOptions { tol: self.linear_tol, max_iter: self.linear_max_iter }
    }

    /// Checks tolerances and the step restriction `dt * mu_sup < 1`.
    pub fn validate(&self, mu_sup: f64) -> Result<(), ConfigError> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(ConfigError::invalid("solver.dt", "time step must be positive and finite"));
        }
        if self.dt * mu_sup >= 1.0 {
            return Err(ConfigError::invalid(
                "solver.dt",
                format!(
                    "dt * mu_sup = {} must be below 1 (step restriction that keeps the implicit reaction step positivity preserving)",
                    self.dt * mu_sup
                ),
            ));
        }
        for (field, v) in [("solver.linear_tol", self.linear_tol), ("solver.picard_tol", self.picard_tol)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::invalid(field, "tolerance must be positive"));
            }
        }
        if self.linear_max_iter == 0 {
            return Err(ConfigError::invalid("solver.linear_max_iter", "must be at least 1"));
        }
        if self.picard_max_iter == 0 {
            return Err(ConfigError::invalid("solver.picard_max_iter", "must be at least 1"));
        }
        if !(self.picard_damping > 0.0 && self.picard_damping <= 1.0) {
            return Err(ConfigError::invalid("solver.picard_damping", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StepError {
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("linear solve failed: {0}")]
    Linear(#[from] LinearSolveError),
    #[error("solver diverged: {0}")]
    Divergence(#[from] KineticsError),
    #[error("Picard iteration did not converge in {iterations} iterations (last update {:e})", history.last().copied().unwrap_or(f64::NAN))]
    PicardNotConverged { iterations: usize, history: Vec<f64> },
    #[error("state has {got} cells, mesh has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimulationError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("step {index} (t = {t}) failed: {source}")]
    Step {
        index: usize,
        t: f64,
        #[source]
        source: StepError,
    },
    #[error("global fixed-point iteration did not converge in {iterations} sweeps (last update {:e})", history.last().copied().unwrap_or(f64::NAN))]
    SchauderNotConverged { iterations: usize, history: Vec<f64> },
}

/// Fields at one time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub t: f64,
    /// Substrate per cell [mol/m³].
    pub s: Vec<f64>,
    /// Biomass per cell [mol/m³].
    pub b: Vec<f64>,
}

/// Solver metadata of one step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepInfo {
    /// End-of-step time.
    pub t: f64,
    /// Linear block solves performed (Picard iterations, or outer sweeps in
    /// the global mode).
    pub picard_iterations: usize,
    /// Relative update norms of the per-step Picard iteration.
    pub picard_history: Vec<f64>,
    pub linear_iterations: usize,
    pub linear_residual: f64,
    /// `max c` over cells in the accepted solve [1/s].
    pub rate_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    /// `states[0]` is the initial data.
    pub states: Vec<State>,
    /// `steps[n]` describes the step producing `states[n + 1]`.
    pub steps: Vec<StepInfo>,
    /// Update norms of the global fixed-point sweeps, empty for per-step runs.
    pub outer_history: Vec<f64>,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &State {
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.t).collect()
    }

    /// A guess for [`solve_schauder_global`]: `initial` at `t = 0`, then
    /// `S ≡ value` at every later time.
    pub fn constant_guess(initial: &State, dt: f64, n_steps: usize, value: f64) -> Self {
        let mut states = vec![initial.clone()];
        states.extend((1..=n_steps).map(|n| State {
            t: initial.t + n as f64 * dt,
            s: vec![value; initial.s.len()],
            b: initial.b.clone(),
        }));
        Self { dt, states, steps: Vec::new(), outer_history: Vec::new() }
    }
}

/// The discretized problem: mesh, coefficients and data.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub mesh: Mesh,
    pub d_s: f64,
    pub d_b: f64,
    pub flow: FlowField,
    pub inlet: InletSchedule,
    pub kinetics: GrowthRateModel,
    pub assembly: AssemblyOptions,
}

impl Model {
    pub fn from_config(config: &ScenarioConfig) -> Result<Self, MeshError> {
        Ok(Self {
            mesh: build_mesh(&config.mesh)?,
            d_s: config.transport.d_s,
            d_b: config.transport.d_b,
            flow: config.flow.clone(),
            inlet: config.inlet.clone(),
            kinetics: config.kinetics,
            assembly: config.transport.assembly(),
        })
    }

    pub fn initial_state(&self, config: &ScenarioConfig) -> State {
        let n = self.mesh.n_cells();
        State { t: 0.0, s: config.initial.s.values(n), b: config.initial.b.values(n) }
    }

    /// Step coefficients `c` for the substrate field `z`.
    pub fn rates(&self, z: &[f64], dt: f64, coupling: ReactionCoupling) -> Result<Vec<f64>, KineticsError> {
        z.iter().map(|&s| Ok(coupling.coefficient(self.kinetics.eval(s)?, dt))).collect()
    }

    /// Step coefficients `c` together with `g = c / z`.
    fn rates_and_specific(&self, z: &[f64], dt: f64, coupling: ReactionCoupling) -> Result<(Vec<f64>, Vec<f64>), KineticsError> {
        let mut c = Vec::with_capacity(z.len());
        let mut g = Vec::with_capacity(z.len());
        for &s in z {
            let mu = self.kinetics.eval(s)?;
            c.push(coupling.coefficient(mu, dt));
            g.push(coupling.specific_coefficient(mu, self.kinetics.specific_rate(s), dt));
        }
        Ok((c, g))
    }

    /// Volume-weighted L² norm `sqrt(sum V u²)`.
    pub fn l2(&self, u: &[f64]) -> f64 {
        self.mesh.cells.iter().zip(u).map(|(c, v)| c.volume * v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn l2_diff(&self, u: &[f64], v: &[f64]) -> f64 {
        self.mesh.cells.iter().zip(u.iter().zip(v)).map(|(c, (a, b))| c.volume * (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

/// Everything about a step that does not depend on the reaction coefficient.
struct StepSystem {
    t1: f64,
    dt: f64,
    /// `I - dt L_S`.
    substrate_matrix: CsrMatrix,
    /// The same, prepared for repeated solves.
    substrate: PreparedSystem,
    /// `I - dt L_B`, to be shifted by `-dt c`.
    biomass: CsrMatrix,
    /// `dt src_S`.
    source: Vec<f64>,
    linear: LinearSolverOptions,
}

struct BlockSolution {
    s: Vec<f64>,
    b: Vec<f64>,
    iterations: usize,
    residual: f64,
}

impl StepSystem {
    fn new(model: &Model, t1: f64, dt: f64, linear: LinearSolverOptions) -> Result<Self, StepError> {
        let s_op = assemble_transport(&model.mesh, model.d_s, &model.flow, t1, &model.assembly, model.inlet.eval(t1))?;
        let b_op = assemble_transport(&model.mesh, model.d_b, &model.flow, t1, &model.assembly, 0.0)?;
        let n = model.mesh.n_cells();
        let id = CsrMatrix::identity(n);
        let substrate_matrix = id.linear_combination(1.0, &s_op.matrix, -dt);
        let substrate = PreparedSystem::new(substrate_matrix.clone(), &linear)?;
        let biomass = id.linear_combination(1.0, &b_op.matrix, -dt);
        let source = s_op.source.iter().map(|v| dt * v).collect();
        Ok(Self { t1, dt, substrate_matrix, substrate, biomass, source, linear })
    }

    fn solve_biomass(&self, prev: &State, c: &[f64]) -> Result<(Vec<f64>, SolveInfo), StepError> {
        let n = prev.s.len();
        if c.len() != n {
            return Err(StepError::DimensionMismatch { expected: n, got: c.len() });
        }
        let shift: Vec<f64> = c.iter().map(|ci| -self.dt * ci).collect();
        let b_sys = PreparedSystem::new(self.biomass.add_diagonal(&shift), &self.linear)?;
        Ok(b_sys.solve(&prev.b, Some(&prev.b))?)
    }

    /// Linear step with frozen `c`: uptake `c B` on the right-hand side.
    fn solve(&self, prev: &State, c: &[f64]) -> Result<BlockSolution, StepError> {
        let (b, info_b) = self.solve_biomass(prev, c)?;
        let rhs: Vec<f64> = (0..b.len()).map(|i| prev.s[i] + self.source[i] - self.dt * c[i] * b[i]).collect();
        let (s, info_s) = self.substrate.solve(&rhs, Some(&prev.s))?;
        Ok(BlockSolution {
            s,
            b,
            iterations: info_b.iterations + info_s.iterations,
            residual: info_b.relative_residual.max(info_s.relative_residual),
        })
    }

    /// Linear step with uptake `g B S` moved into the substrate matrix, where
    /// `g Z = c`. The matrix stays an M-matrix, so `S >= 0` for any `Z`.
    fn solve_uptake(&self, prev: &State, c: &[f64], g: &[f64]) -> Result<BlockSolution, StepError> {
        let (b, info_b) = self.solve_biomass(prev, c)?;
        let uptake: Vec<f64> = g.iter().zip(&b).map(|(gi, bi)| self.dt * gi * bi).collect();
        let s_sys = PreparedSystem::new(self.substrate_matrix.add_diagonal(&uptake), &self.linear)?;
        let rhs: Vec<f64> = (0..b.len()).map(|i| prev.s[i] + self.source[i]).collect();
        let (s, info_s) = s_sys.solve(&rhs, Some(&prev.s))?;
        Ok(BlockSolution {
            s,
            b,
            iterations: info_b.iterations + info_s.iterations,
            residual: info_b.relative_residual.max(info_s.relative_residual),
        })
    }

    /// Re-solves the biomass block with the substrate uptake of `sol` as an
    /// explicit source, `(I - dt L_B) B = B^n + dt g B S`, so the reaction
    /// terms of both blocks cancel exactly.
    fn conserve(&self, prev: &State, g: &[f64], sol: BlockSolution) -> Result<BlockSolution, StepError> {
        let rhs: Vec<f64> = (0..sol.b.len()).map(|i| prev.b[i] + self.dt * g[i] * sol.b[i] * sol.s[i]).collect();
        let (b, info_b) = PreparedSystem::new(self.biomass.clone(), &self.linear)?.solve(&rhs, Some(&sol.b))?;
        Ok(BlockSolution {
            s: sol.s,
            b,
            iterations: info_b.iterations,
            residual: sol.residual.max(info_b.relative_residual),
        })
    }
}

fn check_state(model: &Model, state: &State) -> Result<(), StepError> {
    let n = model.mesh.n_cells();
    for got in [state.s.len(), state.b.len()] {
        if got != n {
            return Err(StepError::DimensionMismatch { expected: n, got });
        }
    }
    Ok(())
}

fn max_of(c: &[f64]) -> f64 {
    c.iter().copied().fold(0.0, f64::max)
}

/// One implicit Euler step of the linear system with frozen coefficient `c`.
pub fn step_linear(model: &Model, state: &State, c: &[f64], dt: f64, opts: &SolverOptions) -> Result<(State, StepInfo), StepError> {
    check_state(model, state)?;
    let t1 = state.t + dt;
    let sys = StepSystem::new(model, t1, dt, opts.linear())?;
    let sol = sys.solve(state, c)?;
    let info = StepInfo {
        t: t1,
        picard_iterations: 1,
        picard_history: Vec::new(),
        linear_iterations: sol.iterations,
        linear_residual: sol.residual,
        rate_max: max_of(c),
    };
    Ok((State { t: t1, s: sol.s, b: sol.b }, info))
}

fn relative_update(model: &Model, new: &[f64], old: &[f64]) -> f64 {
    let scale = model.l2(new).max(model.l2(old));
    if scale == 0.0 {
        0.0
    } else {
        model.l2_diff(new, old) / scale
    }
}

fn relax(z: &mut [f64], target: &[f64], omega: f64) {
    if omega == 1.0 {
        z.copy_from_slice(target);
    } else {
        for (zi, ti) in z.iter_mut().zip(target) {
            *zi += omega * (ti - *zi);
        }
    }
}

/// History length of the Anderson acceleration in [`step_nonlinear`].
pub const ANDERSON_DEPTH: usize = 5;

/// Anderson acceleration of the map `Z -> S_Z`: the next iterate combines
/// the last `ANDERSON_DEPTH + 1` images so as to minimise the volume-weighted
/// linearised residual. Fixed points are unchanged.
struct Anderson {
    beta: f64,
    weights: Vec<f64>,
    dz: VecDeque<Vec<f64>>,
    df: VecDeque<Vec<f64>>,
    last: Option<(Vec<f64>, Vec<f64>)>,
}

impl Anderson {
    fn new(model: &Model, beta: f64) -> Self {
        let weights = model.mesh.cells.iter().map(|c| c.volume.sqrt()).collect();
        Self { beta, weights, dz: VecDeque::new(), df: VecDeque::new(), last: None }
    }

    fn restart(&mut self) {
        self.dz.clear();
        self.df.clear();
    }

    /// Next iterate from the current `z` and its image `g = S_z`, projected
    /// onto `Z >= 0`.
    fn next(&mut self, z: &[f64], image: &[f64]) -> Vec<f64> {
        let f: Vec<f64> = image.iter().zip(z).map(|(a, b)| a - b).collect();
        if let Some((z0, f0)) = self.last.take() {
            self.dz.push_back(z.iter().zip(&z0).map(|(a, b)| a - b).collect());
            self.df.push_back(f.iter().zip(&f0).map(|(a, b)| a - b).collect());
            if self.dz.len() > ANDERSON_DEPTH {
                self.dz.pop_front();
                self.df.pop_front();
            }
        }
        let mut next: Vec<f64> = z.iter().zip(&f).map(|(zi, fi)| zi + self.beta * fi).collect();
        if !self.df.is_empty() {
            let (n, m) = (z.len(), self.df.len());
            let a = DMatrix::from_fn(n, m, |i, j| self.weights[i] * self.df[j][i]);
            let rhs = DVector::from_fn(n, |i, _| self.weights[i] * f[i]);
            let gamma = a.svd(true, true).solve(&rhs, 1e-12 * rhs.norm().max(f64::MIN_POSITIVE)).ok();
            match gamma {
                Some(gamma) if gamma.iter().all(|g| g.is_finite()) => {
                    for (j, gj) in gamma.iter().enumerate() {
                        for (i, x) in next.iter_mut().enumerate() {
                            *x -= gj * (self.dz[j][i] + self.beta * self.df[j][i]);
                        }
                    }
                }
                _ => self.restart(),
            }
        }
        for x in &mut next {
            *x = x.max(0.0);
        }
        self.last = Some((z.to_vec(), f));
        next
    }
}

/// One step of the nonlinear system by Picard iteration on `c = μ(Z)`.
///
/// Each iteration solves the biomass block with `c(Z)` and the substrate
/// block with the uptake written as `g(Z) B S`, `g = c / Z`. Both blocks are
/// M-matrices, so every iterate is nonnegative, and at a fixed point
/// `g(S) S = c(S)` recovers the scheme of [`step_linear`]. The accepted
/// biomass is re-solved with the substrate uptake of the last iterate as its
/// source, so total mass changes only through the boundary, independently of
/// how tightly the iteration converged.
///
/// The iteration stops once the relative update of `S` is at most
/// `picard_tol`, or once the coefficients computed from the new iterate are
/// bitwise identical to the ones just used (the solve is then a fixed point).
/// Iterates are mixed by Anderson acceleration with mixing parameter
/// `picard_damping`, restarted whenever the update more than doubles. This
/// breaks the oscillations and slow contraction that strong uptake
/// (`dt B μ'` close to 1) causes in the plain map.
pub fn step_nonlinear(model: &Model, state: &State, dt: f64, opts: &SolverOptions) -> Result<(State, StepInfo), StepError> {
    check_state(model, state)?;
    let sys = StepSystem::new(model, state.t + dt, dt, opts.linear())?;
    let coupling = opts.reaction_coupling;
    let mut z = state.s.clone();
    let (mut c, mut g) = model.rates_and_specific(&z, dt, coupling)?;
    let mut history: Vec<f64> = Vec::new();
    let mut linear_iterations = 0;
    let mut anderson = Anderson::new(model, opts.picard_damping);
    for k in 1..=opts.picard_max_iter {
        let sol = sys.solve_uptake(state, &c, &g)?;
        linear_iterations += sol.iterations;
        let update = relative_update(model, &sol.s, &z);
        if history.last().is_some_and(|&prev| update > 2.0 * prev) {
            anderson.restart();
        }
        history.push(update);
        z = anderson.next(&z, &sol.s);
        let (c_next, g_next) = model.rates_and_specific(&z, dt, coupling)?;
        if update <= opts.picard_tol || (c_next == c && g_next == g) {
            let sol = sys.conserve(state, &g, sol)?;
            linear_iterations += sol.iterations;
            let info = StepInfo {
                t: sys.t1,
                picard_iterations: k,
                picard_history: history,
                linear_iterations,
                linear_residual: sol.residual,
                rate_max: max_of(&c),
            };
            return Ok((State { t: sys.t1, s: sol.s, b: sol.b }, info));
        }
        c = c_next;
        g = g_next;
    }
    Err(StepError::PicardNotConverged { iterations: opts.picard_max_iter, history })
}

fn step_time(t0: f64, horizon: f64, n: usize, n_steps: usize) -> f64 {
    if n == n_steps {
        t0 + horizon
    } else {
        t0 + horizon * n as f64 / n_steps as f64
    }
}

/// Space–time fixed-point iteration: `Z -> S_Z` over the whole horizon.
///
/// `guess.states[0]` supplies the initial data; the substrate fields of the
/// remaining states supply the first `Z`. Returns the converged trajectory
/// and the number of linear sweeps performed.
pub fn solve_schauder_global(model: &Model, guess: &Trajectory, opts: &SolverOptions) -> Result<(Trajectory, usize), SimulationError> {
    let initial = &guess.states[0];
    check_state(model, initial).map_err(|source| SimulationError::Step { index: 0, t: initial.t, source })?;
    let n_steps = guess.n_steps();
    let dt = guess.dt;
    let horizon = dt * n_steps as f64;
    let coupling = opts.reaction_coupling;
    let step_err = |index: usize, t: f64| move |source: StepError| SimulationError::Step { index, t, source };

    let systems = (1..=n_steps)
        .map(|n| {
            let t1 = step_time(initial.t, horizon, n, n_steps);
            StepSystem::new(model, t1, dt, opts.linear()).map_err(step_err(n - 1, t1))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut z: Vec<Vec<f64>> = guess.states[1..].iter().map(|s| s.s.clone()).collect();
    for (n, zn) in z.iter().enumerate() {
        check_state(model, &State { t: 0.0, s: zn.clone(), b: initial.b.clone() }).map_err(step_err(n, systems[n].t1))?;
    }
    let rates_of = |z: &[Vec<f64>]| -> Result<Vec<Vec<f64>>, SimulationError> {
        z.iter()
            .enumerate()
            .map(|(n, zn)| model.rates(zn, dt, coupling).map_err(|e| step_err(n, systems[n].t1)(e.into())))
            .collect()
    };

    let mut rates = rates_of(&z)?;
    let mut history = Vec::new();
    for sweep in 1..=opts.picard_max_iter {
        let mut states = vec![initial.clone()];
        let mut steps = Vec::with_capacity(n_steps);
        for (n, sys) in systems.iter().enumerate() {
            let sol = sys.solve(&states[n], &rates[n]).map_err(step_err(n, sys.t1))?;
            steps.push(StepInfo {
                t: sys.t1,
                picard_iterations: sweep,
                picard_history: Vec::new(),
                linear_iterations: sol.iterations,
                linear_residual: sol.residual,
                rate_max: max_of(&rates[n]),
            });
            states.push(State { t: sys.t1, s: sol.s, b: sol.b });
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (zn, st) in z.iter().zip(&states[1..]) {
            num += model.l2_diff(&st.s, zn).powi(2);
            den += model.l2(&st.s).powi(2).max(model.l2(zn).powi(2));
        }
        let update = if den == 0.0 { 0.0 } else { (num / den).sqrt() };
        history.push(update);
        for (zn, st) in z.iter_mut().zip(&states[1..]) {
            relax(zn, &st.s, opts.picard_damping);
        }
        let next = rates_of(&z)?;
        if update <= opts.picard_tol || next == rates {
            let traj = Trajectory { dt, states, steps, outer_history: history };
            return Ok((traj, sweep));
        }
        rates = next;
    }
    Err(SimulationError::SchauderNotConverged { iterations: opts.picard_max_iter, history })
}

/// Number of uniform steps covering `horizon` with steps no longer than `dt`.
pub fn step_count(horizon: f64, dt: f64) -> usize {
    if horizon <= 0.0 {
        0
    } else {
        ((horizon / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize
    }
}

/// Integrates from `initial` over `n_steps` uniform steps of length `dt`
/// with the configured nonlinear strategy.
pub fn integrate(model: &Model, initial: &State, dt: f64, n_steps: usize, opts: &SolverOptions) -> Result<Trajectory, SimulationError> {
    check_state(model, initial).map_err(|source| SimulationError::Step { index: 0, t: initial.t, source })?;
    if n_steps == 0 {
        return Ok(Trajectory { dt, states: vec![initial.clone()], steps: Vec::new(), outer_history: Vec::new() });
    }
    match opts.nonlinear_mode {
        NonlinearMode::SchauderGlobal => {
            let value = initial.s.iter().copied().fold(0.0, f64::max);
            let guess = Trajectory::constant_guess(initial, dt, n_steps, value);
            solve_schauder_global(model, &guess, opts).map(|(traj, _)| traj)
        }
        NonlinearMode::PerStepPicard => {
            let horizon = dt * n_steps as f64;
            let mut states = vec![initial.clone()];
            let mut steps = Vec::with_capacity(n_steps);
            for n in 0..n_steps {
                let (mut next, mut info) = step_nonlinear(model, &states[n], dt, opts)
                    .map_err(|source| SimulationError::Step { index: n, t: states[n].t + dt, source })?;
                next.t = step_time(initial.t, horizon, n + 1, n_steps);
                info.t = next.t;
                states.push(next);
                steps.push(info);
            }
            Ok(Trajectory { dt, states, steps, outer_history: Vec::new() })
        }
    }
}

/// Validates the scenario, integrates over `[0, T]` and computes diagnostics.
///
/// `T = 0` is accepted here and yields the initial state alone.
pub fn simulate(config: &ScenarioConfig) -> Result<(Trajectory, DiagnosticsReport), SimulationError> {
    config.validate_allowing_zero_horizon()?;
    let model = Model::from_config(config)?;
    let initial = model.initial_state(config);
    let n_steps = step_count(config.horizon, config.solver.dt);
    let dt = if n_steps == 0 { config.solver.dt } else { config.horizon / n_steps as f64 };
    let traj = integrate(&model, &initial, dt, n_steps, &config.solver)?;
    let report = diagnose(&model, config, &traj);
    Ok((traj, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MeshSpec;

    fn model(n: usize, q: f64, kinetics: GrowthRateModel, s_e: f64) -> Model {
        Model {
            mesh: build_mesh(&MeshSpec::axial(1.0, 0.5, n)).unwrap(),
            d_s: 0.05,
            d_b: 0.02,
            flow: FlowField::constant(q),
            inlet: InletSchedule::constant(s_e),
            kinetics,
            assembly: AssemblyOptions::default(),
        }
    }

    fn uniform(n: usize, s: f64, b: f64) -> State {
        State { t: 0.0, s: vec![s; n], b: vec![b; n] }
    }

    #[test]
    fn uniform_state_is_steady_without_flow_or_reaction() {
        let m = model(6, 0.0, GrowthRateModel::Zero, 0.0);
        let st = uniform(6, 1.3, 0.4);
        let (next, _) = step_linear(&m, &st, &[0.0; 6], 0.7, &SolverOptions::default()).unwrap();
        for i in 0..6 {
            assert!((next.s[i] - 1.3).abs() < 1e-12);
            assert!((next.b[i] - 0.4).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cell_growth_matches_hand_algebra() {
        // Uniform fields on a closed reactor behave as one cell.
        let m = model(2, 0.0, GrowthRateModel::Zero, 0.0);
        let (kappa, dt) = (0.3, 0.5);
        let st = uniform(2, 2.0, 0.7);
        let (next, _) = step_linear(&m, &st, &[kappa; 2], dt, &SolverOptions::default()).unwrap();
        let b1 = 0.7 / (1.0 - dt * kappa);
        let s1 = 2.0 - dt * kappa * b1;
        for i in 0..2 {
            assert!((next.b[i] - b1).abs() < 1e-14);
            assert!((next.s[i] - s1).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_kinetics_converge_in_one_iteration() {
        let m = model(8, 0.2, GrowthRateModel::Zero, 1.0);
        let st = uniform(8, 0.1, 0.5);
        let opts = SolverOptions { picard_max_iter: 1, ..Default::default() };
        let (next, info) = step_nonlinear(&m, &st, 0.1, &opts).unwrap();
        assert_eq!(info.picard_iterations, 1);
        let (lin, _) = step_linear(&m, &st, &[0.0; 8], 0.1, &opts).unwrap();
        assert_eq!(next, lin);
    }

    #[test]
    fn zero_substrate_stays_zero() {
        let m = model(8, 0.2, GrowthRateModel::monod(1.0, 0.5), 0.0);
        let st = uniform(8, 0.0, 0.5);
        let (next, info) = step_nonlinear(&m, &st, 0.1, &SolverOptions::default()).unwrap();
        assert_eq!(info.picard_iterations, 1);
        assert!(next.s.iter().all(|&v| v == 0.0));
        let (pure, _) = step_linear(&m, &st, &[0.0; 8], 0.1, &SolverOptions::default()).unwrap();
        assert_eq!(next.b, pure.b);
    }

    #[test]
    fn picard_failure_reports_history() {
        let m = model(8, 0.2, GrowthRateModel::monod(2.0, 0.1), 1.0);
        let st = uniform(8, 1.0, 1.0);
        let opts = SolverOptions { picard_max_iter: 2, picard_tol: 1e-15, ..Default::default() };
        match step_nonlinear(&m, &st, 0.4, &opts) {
            Err(StepError::PicardNotConverged { iterations: 2, history }) => assert_eq!(history.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dimension_errors() {
        let m = model(4, 0.2, GrowthRateModel::Zero, 1.0);
        let st = uniform(3, 0.0, 0.0);
        assert!(matches!(step_linear(&m, &st, &[0.0; 3], 0.1, &SolverOptions::default()), Err(StepError::DimensionMismatch { .. })));
        let st = uniform(4, 0.0, 0.0);
        assert!(matches!(step_linear(&m, &st, &[0.0; 3], 0.1, &SolverOptions::default()), Err(StepError::DimensionMismatch { .. })));
    }

    #[test]
    fn non_finite_substrate_is_divergence() {
        let m = model(4, 0.2, GrowthRateModel::monod(1.0, 1.0), 1.0);
        let mut st = uniform(4, 0.0, 0.0);
        st.s[2] = f64::NAN;
        assert!(matches!(step_nonlinear(&m, &st, 0.1, &SolverOptions::default()), Err(StepError::Divergence(_))));
    }

    #[test]
    fn exponential_fit_coefficient() {
        let c = ReactionCoupling::ExponentialFit.coefficient(0.5, 0.2);
        assert!((1.0 / (1.0 - 0.2 * c) - (0.1f64).exp()).abs() < 1e-15);
        assert_eq!(ReactionCoupling::ExponentialFit.coefficient(0.0, 0.2), 0.0);
        assert_eq!(ReactionCoupling::Implicit.coefficient(0.5, 0.2), 0.5);
    }

    #[test]
    fn exponential_fit_respects_growth_bound_where_implicit_does_not() {
        let m = model(4, 0.0, GrowthRateModel::capped_linear(3.0, 1.0), 0.0);
        let st = uniform(4, 100.0, 1.0);
        let dt = 0.5;
        let bound = (dt * m.kinetics.sup()).exp();
        let step = |coupling| {
            let opts = SolverOptions { reaction_coupling: coupling, ..Default::default() };
            let (next, _) = step_nonlinear(&m, &st, dt, &opts).unwrap();
            next.b.iter().copied().fold(0.0, f64::max)
        };
        let fit = step(ReactionCoupling::ExponentialFit);
        assert!((fit - bound).abs() <= 1e-12 * bound, "{fit} vs {bound}");
        let implicit = step(ReactionCoupling::Implicit);
        assert!(implicit > bound * (1.0 + 1e-3), "{implicit} vs {bound}");
    }

    #[test]
    fn loose_picard_tolerance_keeps_mass_exact() {
        let m = model(10, 0.0, GrowthRateModel::monod(1.0, 0.3), 0.0);
        let st = State {
            t: 0.0,
            s: (0..10).map(|i| 0.2 + 0.3 * i as f64).collect(),
            b: (0..10).map(|i| 1.0 + 0.1 * (i % 3) as f64).collect(),
        };
        let total = |x: &State| x.s.iter().chain(&x.b).sum::<f64>();
        let opts = SolverOptions { picard_tol: 1e-3, ..Default::default() };
        let (next, info) = step_nonlinear(&m, &st, 0.8, &opts).unwrap();
        assert!(info.picard_iterations > 1);
        assert!((total(&next) - total(&st)).abs() <= 1e-13 * total(&st));
        assert!(next.s.iter().chain(&next.b).all(|&v| v >= 0.0));
    }

    #[test]
    fn schauder_zero_kinetics_single_sweep() {
        let m = model(8, 0.2, GrowthRateModel::Zero, 1.0);
        let st = uniform(8, 0.0, 0.3);
        let opts = SolverOptions { picard_max_iter: 1, ..Default::default() };
        let guess = Trajectory::constant_guess(&st, 0.1, 5, 0.0);
        let (traj, sweeps) = solve_schauder_global(&m, &guess, &opts).unwrap();
        assert_eq!(sweeps, 1);
        let per_step = integrate(&m, &st, 0.1, 5, &opts).unwrap();
        for (a, b) in traj.states.iter().zip(&per_step.states) {
            assert_eq!(a.s, b.s);
            assert_eq!(a.b, b.b);
        }
    }

    #[test]
    fn step_counts() {
        assert_eq!(step_count(0.0, 1.0), 0);
        assert_eq!(step_count(10.0, 1.0), 10);
        assert_eq!(step_count(10.0, 3.0), 4);
        assert_eq!(step_count(1.0, 5.0), 1);
        assert_eq!(step_count(0.3, 0.1), 3);
    }
}
