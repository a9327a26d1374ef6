//! Checks of the qualitative properties of computed trajectories.
//!
//! All norms and integrals use the scheme's own quadrature:
//!
//! * `||u||² = sum_i V_i u_i²` (cell volumes);
//! * `|u|₁² = sum_f (A_f / h_f) (u_a - u_b)²` over interior faces (the
//!   two-point stiffness form);
//! * `||u||_H² = ||u||² + |u|₁²`;
//! * boundary integrals are sums over boundary faces using the owner value.
//!
//! The discrete inequalities are then statements about the system actually
//! solved, and can be asserted literally.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::io::Write;

use crate::config::ScenarioConfig;
use crate::discretization::{assemble_transport, inlet_influx, outlet_outflow, AssemblyError, InletSchedule, TransportOperator};
use crate::geometry::{boundary_measure, BoundaryTag, Mesh};
use crate::kinetics::GrowthRateModel;
use crate::linalg::{CsrMatrix, LinearSolveError, LinearSolverOptions, PreparedSystem};
use crate::timestepping::{solve_schauder_global, Model, SimulationError, SolverOptions, State, Trajectory};

/// Slack on the theorem bounds that absorbs linear-solver residuals.
pub const LINF_SLACK: f64 = 1e-8;
/// Tolerance of the nonnegativity check, relative to the data scale.
pub const NONNEGATIVITY_TOL: f64 = 1e-12;
/// Tolerance of the mass ledger, relative to its largest entry.
pub const MASS_BALANCE_TOL: f64 = 1e-9;
/// Relative slack of the energy inequalities.
pub const ENERGY_SLACK: f64 = 1e-6;
/// Rounding allowance of the randomized bilinear-form inequalities.
pub const WITNESS_ROUNDING: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("trace-constant power iteration did not converge in {iterations} iterations")]
    EigenNotConverged { iterations: usize },
    #[error(transparent)]
    Linear(#[from] LinearSolveError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error("weighted energy estimate needs 2 dt lambda_h < 1, got {0}")]
    StepTooLarge(f64),
    #[error("energy estimate assumes a nonnegative flow rate")]
    NegativeFlow,
}

fn max_abs(u: &[f64]) -> f64 {
    u.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn min_of(u: &[f64]) -> f64 {
    u.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max_of(u: &[f64]) -> f64 {
    u.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// `||u||²` with volume weights.
pub fn l2_squared(mesh: &Mesh, u: &[f64]) -> f64 {
    mesh.cells.iter().zip(u).map(|(c, v)| c.volume * v * v).sum()
}

/// `|u|₁²`, the two-point stiffness seminorm.
pub fn h1_seminorm_squared(mesh: &Mesh, u: &[f64]) -> f64 {
    mesh.interior_faces
        .iter()
        .map(|f| {
            let d = u[f.cells.0] - u[f.cells.1];
            f.area / f.distance * d * d
        })
        .sum()
}

pub fn h1_norm_squared(mesh: &Mesh, u: &[f64]) -> f64 {
    l2_squared(mesh, u) + h1_seminorm_squared(mesh, u)
}

// ---------------------------------------------------------------------------
// Nonnegativity and L∞ bounds

#[derive(Debug, Clone, PartialEq)]
pub struct NonnegativityReport {
    pub min_s: f64,
    pub min_b: f64,
    /// `max(||S_init||∞, ||B_init||∞, sup S_e, 1)`.
    pub scale: f64,
    pub passed: bool,
}

/// Smallest substrate and biomass values over all cells and steps; passes
/// when both are at least `-1e-12 * scale`.
pub fn check_nonnegativity(traj: &Trajectory, inlet: &InletSchedule) -> NonnegativityReport {
    let init = &traj.states[0];
    let horizon = traj.final_state().t - init.t;
    let scale = max_abs(&init.s).max(max_abs(&init.b)).max(inlet.sup(horizon)).max(1.0);
    let min_s = traj.states.iter().map(|s| min_of(&s.s)).fold(f64::INFINITY, f64::min);
    let min_b = traj.states.iter().map(|s| min_of(&s.b)).fold(f64::INFINITY, f64::min);
    let floor = -NONNEGATIVITY_TOL * scale;
    NonnegativityReport { min_s, min_b, scale, passed: min_s >= floor && min_b >= floor }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinfReport {
    /// `||B_init||∞ e^{mu_sup t_n} (1 + slack) - max B(t_n)` per state.
    pub margin_b: Vec<f64>,
    /// `max(||S_init||∞, sup S_e) (1 + slack) - max S(t_n)` per state.
    pub margin_s: Vec<f64>,
    pub passed: bool,
}

impl LinfReport {
    pub fn min_margin_b(&self) -> f64 {
        min_of(&self.margin_b)
    }

    pub fn min_margin_s(&self) -> f64 {
        min_of(&self.margin_s)
    }
}

pub fn check_linf_bounds(traj: &Trajectory, kinetics: &GrowthRateModel, inlet: &InletSchedule) -> LinfReport {
    let init = &traj.states[0];
    let horizon = traj.final_state().t - init.t;
    let mu_sup = kinetics.sup();
    let b0 = max_abs(&init.b);
    let s_bound = max_abs(&init.s).max(inlet.sup(horizon)) * (1.0 + LINF_SLACK);
    let margin_b: Vec<f64> = traj
        .states
        .iter()
        .map(|st| b0 * (mu_sup * (st.t - init.t)).exp() * (1.0 + LINF_SLACK) - max_of(&st.b))
        .collect();
    let margin_s: Vec<f64> = traj.states.iter().map(|st| s_bound - max_of(&st.s)).collect();
    let passed = margin_b.iter().chain(&margin_s).all(|m| *m >= 0.0);
    LinfReport { margin_b, margin_s, passed }
}

// ---------------------------------------------------------------------------
// Mass balance

#[derive(Debug, Clone, PartialEq)]
pub struct MassBalanceReport {
    /// `sum V S` per state [mol].
    pub moles_s: Vec<f64>,
    pub moles_b: Vec<f64>,
    /// Cumulative inlet influx up to each state [mol].
    pub influx: Vec<f64>,
    /// Cumulative outlet outflow of `S + B` up to each state [mol].
    pub outflow: Vec<f64>,
    /// Moles(t_n) - Moles(t_0) - influx + outflow [mol].
    pub residual: Vec<f64>,
    /// `max |residual| / max |ledger entry|`.
    pub relative_residual: f64,
    pub passed: bool,
}

/// Conservation ledger of `S + B`. Fluxes use the operator's own quadrature:
/// implicit Euler evaluates them at the end of each step.
pub fn mass_balance(traj: &Trajectory, model: &Model) -> MassBalanceReport {
    let mesh = &model.mesh;
    let moles = |u: &[f64]| -> f64 { mesh.cells.iter().zip(u).map(|(c, v)| c.volume * v).sum() };
    let moles_s: Vec<f64> = traj.states.iter().map(|s| moles(&s.s)).collect();
    let moles_b: Vec<f64> = traj.states.iter().map(|s| moles(&s.b)).collect();
    let mut influx = vec![0.0];
    let mut outflow = vec![0.0];
    for w in traj.states.windows(2) {
        let (next, dt) = (&w[1], traj.dt);
        let total: Vec<f64> = next.s.iter().zip(&next.b).map(|(s, b)| s + b).collect();
        influx.push(influx.last().unwrap() + dt * inlet_influx(mesh, &model.flow, next.t, model.inlet.eval(next.t)));
        outflow.push(outflow.last().unwrap() + dt * outlet_outflow(mesh, &model.flow, next.t, &total));
    }
    let m0 = moles_s[0] + moles_b[0];
    let residual: Vec<f64> = (0..traj.states.len()).map(|n| moles_s[n] + moles_b[n] - m0 - influx[n] + outflow[n]).collect();
    let largest = moles_s.iter().zip(&moles_b).map(|(a, b)| a.abs().max(b.abs()).max((a + b).abs())).chain(influx.iter().copied()).chain(outflow.iter().copied()).fold(0.0, f64::max);
    let worst = max_abs(&residual);
    let relative_residual = if largest == 0.0 { worst } else { worst / largest };
    MassBalanceReport { moles_s, moles_b, influx, outflow, residual, relative_residual, passed: relative_residual <= MASS_BALANCE_TOL }
}

// ---------------------------------------------------------------------------
// Trace constant, coercivity margin and bilinear-form constants

/// `min(D_S, D_B) / C_T² - sup Q⁻`; positive when negative flow rates are
/// small enough for the forms to stay coercive.
pub fn coercivity_margin(config: &ScenarioConfig, c_t: f64) -> f64 {
    config.transport.d_s.min(config.transport.d_b) / (c_t * c_t) - config.flow.sup_negative_part(config.horizon)
}

/// Mesh surrogate of the trace constant: `sqrt(λ_max)` of the generalized
/// eigenproblem `M_Γ x = λ K x`, with `M_Γ` the diagonal boundary mass (all
/// boundary faces) and `K = diag(V) + stiffness` the discrete H¹ form.
///
/// Power iteration on `K⁻¹ M_Γ` with Rayleigh quotients, to relative
/// change 1e-8.
pub fn estimate_trace_constant(mesh: &Mesh) -> Result<f64, AnalysisError> {
    const TOL: f64 = 1e-8;
    const MAX_ITER: usize = 200_000;
    let n = mesh.n_cells();
    let mut mb = vec![0.0; n];
    for f in &mesh.boundary_faces {
        mb[f.cell] += f.area;
    }
    let mut t: Vec<(usize, usize, f64)> = mesh.cells.iter().enumerate().map(|(i, c)| (i, i, c.volume)).collect();
    for f in &mesh.interior_faces {
        let g = f.area / f.distance;
        let (a, b) = f.cells;
        t.extend([(a, a, g), (b, b, g), (a, b, -g), (b, a, -g)]);
    }
    let k = CsrMatrix::from_triplets(n, &t);
    let sys = PreparedSystem::new(k.clone(), &LinearSolverOptions { tol: 1e-13, max_iter: 10_000 })?;
    let rayleigh = |x: &[f64]| -> f64 {
        let num: f64 = x.iter().zip(&mb).map(|(xi, m)| m * xi * xi).sum();
        let kx = k.mul_vec(x);
        num / x.iter().zip(&kx).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut x = vec![1.0; n];
    let mut lambda = rayleigh(&x);
    for _ in 0..MAX_ITER {
        let rhs: Vec<f64> = x.iter().zip(&mb).map(|(xi, m)| m * xi).collect();
        let (mut y, _) = sys.solve(&rhs, Some(&x))?;
        let norm = max_abs(&y);
        y.iter_mut().for_each(|v| *v /= norm);
        x = y;
        let next = rayleigh(&x);
        if (next - lambda).abs() <= TOL * next {
            return Ok(next.sqrt());
        }
        lambda = next;
    }
    Err(AnalysisError::EigenNotConverged { iterations: MAX_ITER })
}

/// Continuity and coercivity constants for one species.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeciesConstants {
    pub diffusion: f64,
    pub sup_q: f64,
    /// Continuity: `|a(p, v)| <= k ||p||_H ||v||_H`.
    pub k: f64,
    pub epsilon: f64,
    /// `D - sup_Q / (4 ε)`.
    pub alpha1: f64,
    /// `λ - ε sup_Q`, equal to `delta`.
    pub alpha2: f64,
    pub alpha: f64,
    pub delta: f64,
    /// Coercivity: `a(p, p) + λ ||p||² >= α ||p||_H²`.
    pub lambda: f64,
}

impl SpeciesConstants {
    pub fn new(diffusion: f64, sup_q: f64, c_t: f64) -> Self {
        let k = diffusion + (1.0 + c_t * c_t) * sup_q;
        let epsilon = if sup_q > 0.0 { sup_q / (2.0 * diffusion) } else { 1.0 };
        let alpha1 = diffusion - sup_q / (4.0 * epsilon);
        let delta = sup_q.max(1.0) * 1e-3;
        let lambda = epsilon * sup_q + delta;
        let alpha2 = delta;
        Self { diffusion, sup_q, k, epsilon, alpha1, alpha2, alpha: alpha1.min(alpha2), delta, lambda }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearConstants {
    pub c_t: f64,
    pub substrate: SpeciesConstants,
    pub biomass: SpeciesConstants,
}

pub fn bilinear_constants_report(config: &ScenarioConfig, c_t: f64) -> BilinearConstants {
    let sup_q = config.flow.sup(config.horizon);
    BilinearConstants {
        c_t,
        substrate: SpeciesConstants::new(config.transport.d_s, sup_q, c_t),
        biomass: SpeciesConstants::new(config.transport.d_b, sup_q, c_t),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WitnessReport {
    pub pairs: usize,
    pub continuity_violations: usize,
    pub coercivity_violations: usize,
    /// Largest `|a(p, v)| / (k ||p||_H ||v||_H)` seen.
    pub max_continuity_ratio: f64,
    /// Smallest `(a(p, p) + λ||p||²) / (α ||p||_H²)` seen.
    pub min_coercivity_ratio: f64,
}

impl WitnessReport {
    pub fn passed(&self) -> bool {
        self.continuity_violations == 0 && self.coercivity_violations == 0
    }
}

fn random_field(rng: &mut ChaCha8Rng, mesh: &Mesh) -> Vec<f64> {
    let length = mesh.spec.length;
    let radius = mesh.spec.radius;
    if rng.random_bool(0.5) {
        (0..mesh.n_cells()).map(|_| rng.random_range(-1.0..1.0)).collect()
    } else {
        let a0: f64 = rng.random_range(-1.0..1.0);
        let kz: f64 = rng.random_range(0.0..4.0);
        let kr: f64 = rng.random_range(0.0..2.0);
        let az: f64 = rng.random_range(-1.0..1.0);
        mesh.cells
            .iter()
            .map(|c| a0 + az * (std::f64::consts::PI * kz * c.center[1] / length).cos() * (kr * c.center[0] / radius).cos())
            .collect()
    }
}

/// Randomized test of continuity and coercivity of the assembled forms
/// `a_h(p, v) = -vᵀ diag(V) L p`, at the start, middle and end of the horizon,
/// for both species.
pub fn bilinear_witness(model: &Model, constants: &BilinearConstants, horizon: f64, pairs: usize, seed: u64) -> Result<WitnessReport, AnalysisError> {
    let mesh = &model.mesh;
    let volumes = mesh.volumes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let times = [0.0, 0.5 * horizon, horizon];
    let mut ops: Vec<(TransportOperator, SpeciesConstants)> = Vec::new();
    for &t in &times {
        ops.push((assemble_transport(mesh, model.d_s, &model.flow, t, &model.assembly, 0.0)?, constants.substrate));
        ops.push((assemble_transport(mesh, model.d_b, &model.flow, t, &model.assembly, 0.0)?, constants.biomass));
    }
    let mut report = WitnessReport {
        pairs,
        continuity_violations: 0,
        coercivity_violations: 0,
        max_continuity_ratio: 0.0,
        min_coercivity_ratio: f64::INFINITY,
    };
    for i in 0..pairs {
        let (op, k) = &ops[i % ops.len()];
        let p = random_field(&mut rng, mesh);
        let v = random_field(&mut rng, mesh);
        let (np, nv) = (h1_norm_squared(mesh, &p).sqrt(), h1_norm_squared(mesh, &v).sqrt());
        let cont = op.bilinear(&volumes, &p, &v).abs() / (k.k * np * nv);
        report.max_continuity_ratio = report.max_continuity_ratio.max(cont);
        if cont > 1.0 + WITNESS_ROUNDING {
            report.continuity_violations += 1;
        }
        let coer = (op.bilinear(&volumes, &p, &p) + k.lambda * l2_squared(mesh, &p)) / (k.alpha * np * np);
        report.min_coercivity_ratio = report.min_coercivity_ratio.min(coer);
        if coer < 1.0 - WITNESS_ROUNDING {
            report.coercivity_violations += 1;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Energy estimates

/// One weighted energy inequality `lhs <= rhs`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyInequality {
    pub lhs: f64,
    pub rhs: f64,
}

impl EnergyInequality {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs * (1.0 + ENERGY_SLACK)
    }
}

/// Discrete energy ledger for `S̄ = e^{-λt} S`, `B̄ = e^{-λt} B`.
///
/// With `w_n = e^{-λ t_n}`, `Λ = e^{2λ dt}`, `λ_h = (1 - e^{-2λ dt}) / (2 dt)`,
/// `Q = sup Q`, `|Γ| = |Γ_in|^{1/2}`, `C = C_T` and `c = max c`, sums running
/// over `n = 1..N`:
///
/// ```text
/// substrate: ½||S̄^N||² + Λ(λ_h - Q(ε₂ + |Γ|C²/(4ε₁)) - c/2) Σ dt ||S̄^n||²
///              + Λ(D_S - Q/(4ε₂) - Q|Γ|C²/(4ε₁)) Σ dt |S̄^n|₁²
///            <= ½||S⁰||² + Λ ε₁ Q |Γ| Σ dt w_{n-1}² S_e(t_n)² + Λ (c/2) Σ dt ||B̄^n||²
/// biomass:   ½||B̄^N||² + Λ(λ_h - ε₃Q - c) Σ dt ||B̄^n||² + Λ(D_B - Q/(4ε₃)) Σ dt |B̄^n|₁²
///            <= ½||B⁰||²
/// ```
///
/// and the resulting `L²(H¹)` bounds
/// `||B̄||² <= α₁ ||B⁰||²`, `||S̄||² <= α₂ (½||S⁰||² + Λε₁Q|Γ| ||S_e||_w² + Λ(c/2) α₁ ||B⁰||²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyReport {
    pub lambda: f64,
    pub lambda_h: f64,
    pub step_factor: f64,
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub epsilon3: f64,
    pub c_max: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub substrate: EnergyInequality,
    pub biomass: EnergyInequality,
    pub bound_biomass: EnergyInequality,
    pub bound_substrate: EnergyInequality,
}

impl EnergyReport {
    pub fn passed(&self) -> bool {
        [self.substrate, self.biomass, self.bound_biomass, self.bound_substrate].iter().all(EnergyInequality::holds)
    }
}

/// Evaluates the weighted energy ledger on a trajectory.
///
/// `λ` follows the constructive choice
/// `λ_h = Q max(ε₃, ε₂ + |Γ|C²/(4ε₁)) + c + δ`, with `δ` from the bilinear
/// constants, reduced if needed so that `2 dt λ_h < 1`.
pub fn energy_estimate_report(traj: &Trajectory, model: &Model, constants: &BilinearConstants) -> Result<EnergyReport, AnalysisError> {
    let mesh = &model.mesh;
    let horizon = traj.final_state().t - traj.states[0].t;
    if model.flow.sup_negative_part(horizon) > 0.0 {
        return Err(AnalysisError::NegativeFlow);
    }
    let (d_s, d_b) = (model.d_s, model.d_b);
    let q = model.flow.sup(horizon);
    let c_t = constants.c_t;
    let gamma = boundary_measure(mesh, BoundaryTag::Inlet).sqrt();
    let c_max = traj.steps.iter().map(|s| s.rate_max).fold(0.0, f64::max);
    let (eps1, eps2, eps3) = if q > 0.0 { (gamma * c_t * c_t * q / d_s, q / d_s, q / (2.0 * d_b)) } else { (1.0, 1.0, 1.0) };
    let trace_term = q * gamma * c_t * c_t / (4.0 * eps1);
    let k_s = q * eps2 + trace_term + 0.5 * c_max;
    let k_b = eps3 * q + c_max;
    let m_s = d_s - q / (4.0 * eps2) - trace_term;
    let m_b = d_b - q / (4.0 * eps3);
    let dt = traj.dt;
    let base = (q * eps3).max(q * eps2 + trace_term) + c_max;
    let ceiling = 0.5 / dt;
    if base >= ceiling {
        return Err(AnalysisError::StepTooLarge(2.0 * dt * (base + constants.substrate.delta)));
    }
    let delta = constants.substrate.delta.min(0.5 * (ceiling - base));
    let lambda_h = base + delta;
    let lambda = -(-2.0 * dt * lambda_h).ln_1p() / (2.0 * dt);
    let step_factor = (2.0 * lambda * dt).exp();

    let weight = |n: usize| (-lambda * dt * n as f64).exp();
    let n_steps = traj.n_steps();
    let (mut s_l2, mut s_h1, mut b_l2, mut b_h1, mut se2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for n in 1..=n_steps {
        let st = &traj.states[n];
        let w2 = weight(n).powi(2);
        s_l2 += dt * w2 * l2_squared(mesh, &st.s);
        s_h1 += dt * w2 * h1_seminorm_squared(mesh, &st.s);
        b_l2 += dt * w2 * l2_squared(mesh, &st.b);
        b_h1 += dt * w2 * h1_seminorm_squared(mesh, &st.b);
        se2 += dt * weight(n - 1).powi(2) * model.inlet.eval(st.t).powi(2);
    }
    let last = traj.final_state();
    let w_n2 = weight(n_steps).powi(2);
    let s0 = l2_squared(mesh, &traj.states[0].s);
    let b0 = l2_squared(mesh, &traj.states[0].b);

    let substrate = EnergyInequality {
        lhs: 0.5 * w_n2 * l2_squared(mesh, &last.s) + step_factor * ((lambda_h - k_s) * s_l2 + m_s * s_h1),
        rhs: 0.5 * s0 + step_factor * (eps1 * q * gamma * se2 + 0.5 * c_max * b_l2),
    };
    let biomass = EnergyInequality {
        lhs: 0.5 * w_n2 * l2_squared(mesh, &last.b) + step_factor * ((lambda_h - k_b) * b_l2 + m_b * b_h1),
        rhs: 0.5 * b0,
    };
    let mb = step_factor * (lambda_h - k_b).min(m_b);
    let ms = step_factor * (lambda_h - k_s).min(m_s);
    let alpha1 = 1.0 / (2.0 * mb);
    let alpha2 = 1.0 / ms;
    let bound_biomass = EnergyInequality { lhs: b_l2 + b_h1, rhs: alpha1 * b0 };
    let bound_substrate = EnergyInequality {
        lhs: s_l2 + s_h1,
        rhs: alpha2 * (0.5 * s0 + step_factor * eps1 * q * gamma * se2 + step_factor * 0.5 * c_max * alpha1 * b0),
    };
    Ok(EnergyReport {
        lambda,
        lambda_h,
        step_factor,
        epsilon1: eps1,
        epsilon2: eps2,
        epsilon3: eps3,
        c_max,
        alpha1,
        alpha2,
        substrate,
        biomass,
        bound_biomass,
        bound_substrate,
    })
}

// ---------------------------------------------------------------------------
// Uniqueness

#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessReport {
    /// `sqrt(sum_n dt (||S_a - S_b||² + ||B_a - B_b||²))`.
    pub gap: f64,
    /// `gap` divided by the same norm of the first trajectory.
    pub relative_gap: f64,
    pub sweeps: (usize, usize),
}

/// The two canonical guesses: `Z ≡ 0` and `Z ≡ sup S_e`.
pub fn canonical_guesses(initial: &State, dt: f64, n_steps: usize, inlet: &InletSchedule) -> (Trajectory, Trajectory) {
    let sup = inlet.sup(dt * n_steps as f64);
    (Trajectory::constant_guess(initial, dt, n_steps, 0.0), Trajectory::constant_guess(initial, dt, n_steps, sup))
}

/// Distance in `L²(Ω × (0, T))` between two trajectories on the same grid.
pub fn trajectory_distance(mesh: &Mesh, a: &Trajectory, b: &Trajectory) -> (f64, f64) {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (sa, sb) in a.states[1..].iter().zip(&b.states[1..]) {
        let ds: Vec<f64> = sa.s.iter().zip(&sb.s).map(|(x, y)| x - y).collect();
        let db: Vec<f64> = sa.b.iter().zip(&sb.b).map(|(x, y)| x - y).collect();
        diff += a.dt * (l2_squared(mesh, &ds) + l2_squared(mesh, &db));
        norm += a.dt * (l2_squared(mesh, &sa.s) + l2_squared(mesh, &sa.b));
    }
    let gap = diff.sqrt();
    (gap, if norm == 0.0 { gap } else { gap / norm.sqrt() })
}

/// Runs the global fixed-point iteration from two guesses and measures the
/// distance between the limits.
pub fn uniqueness_gap(model: &Model, guess_a: &Trajectory, guess_b: &Trajectory, opts: &SolverOptions) -> Result<UniquenessReport, SimulationError> {
    let (a, na) = solve_schauder_global(model, guess_a, opts)?;
    let (b, nb) = solve_schauder_global(model, guess_b, opts)?;
    let (gap, relative_gap) = trajectory_distance(&model.mesh, &a, &b);
    Ok(UniquenessReport { gap, relative_gap, sweeps: (na, nb) })
}

// ---------------------------------------------------------------------------
// Report

/// Per-state diagnostics row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub step: usize,
    pub t: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub min_b: f64,
    pub max_b: f64,
    pub moles_s: f64,
    pub moles_b: f64,
    pub influx: f64,
    pub outflow: f64,
    pub residual: f64,
    pub margin_b: f64,
    pub margin_s: f64,
    pub picard_iterations: usize,
    pub linear_residual: f64,
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckStatus {
    Passed,
    Failed(String),
    /// Hypotheses not met; the check is reported but not asserted.
    NotApplicable(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub property: &'static str,
    pub status: CheckStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    /// One row per stored state, `rows[0]` being the initial data.
    pub rows: Vec<StepRow>,
    pub nonnegativity: NonnegativityReport,
    pub linf: LinfReport,
    pub mass: MassBalanceReport,
    pub trace_constant: Result<f64, AnalysisError>,
    pub coercivity_margin: Option<f64>,
    pub constants: Option<BilinearConstants>,
    pub witness: Option<Result<WitnessReport, AnalysisError>>,
    pub energy: Option<Result<EnergyReport, AnalysisError>>,
    pub checks: Vec<CheckOutcome>,
}

impl DiagnosticsReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| !matches!(c.status, CheckStatus::Failed(_)))
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.checks.iter().filter(|c| matches!(c.status, CheckStatus::Failed(_))).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,t,min_s,max_s,min_b,max_b,moles_s,moles_b,influx,outflow,residual,margin_b,margin_s,picard_iterations,linear_residual")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{},{:e}",
                r.step, r.t, r.min_s, r.max_s, r.min_b, r.max_b, r.moles_s, r.moles_b, r.influx, r.outflow, r.residual, r.margin_b, r.margin_s, r.picard_iterations, r.linear_residual
            )?;
        }
        Ok(())
    }

    /// Human-readable summary block.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "checks:");
        for c in &self.checks {
            let status = match &c.status {
                CheckStatus::Passed => "PASS".to_string(),
                CheckStatus::Failed(why) => format!("FAIL ({why})"),
                CheckStatus::NotApplicable(why) => format!("n/a ({why})"),
            };
            let _ = writeln!(s, "  {:<20} {:<58} {}", c.name, c.property, status);
        }
        let _ = writeln!(s, "minima: S = {:e}, B = {:e} (scale {:e})", self.nonnegativity.min_s, self.nonnegativity.min_b, self.nonnegativity.scale);
        let _ = writeln!(s, "bound margins: B = {:e}, S = {:e}", self.linf.min_margin_b(), self.linf.min_margin_s());
        let _ = writeln!(s, "mass balance: max relative residual {:e}", self.mass.relative_residual);
        match &self.trace_constant {
            Ok(c) => {
                let _ = writeln!(s, "trace constant C_T = {c:.6e}");
            }
            Err(e) => {
                let _ = writeln!(s, "trace constant: {e}");
            }
        }
        if let Some(m) = self.coercivity_margin {
            let _ = writeln!(s, "coercivity margin min(D_S, D_B)/C_T^2 - sup Q- = {m:e}");
        }
        if let Some(k) = &self.constants {
            for (name, c) in [("S", &k.substrate), ("B", &k.biomass)] {
                let _ = writeln!(
                    s,
                    "constants {name}: k = {:e}, epsilon = {:e}, alpha1 = {:e}, alpha2 = {:e}, alpha = {:e}, lambda = {:e}, delta = {:e}",
                    c.k, c.epsilon, c.alpha1, c.alpha2, c.alpha, c.lambda, c.delta
                );
            }
        }
        if let Some(Ok(w)) = &self.witness {
            let _ = writeln!(
                s,
                "bilinear witness: {} pairs, max continuity ratio {:.6}, min coercivity ratio {:.6}",
                w.pairs, w.max_continuity_ratio, w.min_coercivity_ratio
            );
        }
        if let Some(Ok(e)) = &self.energy {
            let _ = writeln!(
                s,
                "energy: lambda = {:e}, eps = ({:e}, {:e}, {:e}), alpha1 = {:e}, alpha2 = {:e}",
                e.lambda, e.epsilon1, e.epsilon2, e.epsilon3, e.alpha1, e.alpha2
            );
            for (name, q) in [("S", e.substrate), ("B", e.biomass), ("bound B", e.bound_biomass), ("bound S", e.bound_substrate)] {
                let _ = writeln!(s, "  {name:<8} lhs = {:e} rhs = {:e}", q.lhs, q.rhs);
            }
        }
        s
    }
}

fn status(passed: bool, why: impl FnOnce() -> String) -> CheckStatus {
    if passed {
        CheckStatus::Passed
    } else {
        CheckStatus::Failed(why())
    }
}

/// Number of random pairs used by the bilinear witness in [`diagnose`].
pub const WITNESS_PAIRS: usize = 1000;

/// Computes every diagnostic that does not need additional solves.
///
/// When `config.checks.theorems` is off, all outcomes are still computed
/// but reported as not applicable.
pub fn diagnose(model: &Model, config: &ScenarioConfig, traj: &Trajectory) -> DiagnosticsReport {
    let nonnegativity = check_nonnegativity(traj, &model.inlet);
    let linf = check_linf_bounds(traj, &model.kinetics, &model.inlet);
    let mass = mass_balance(traj, model);
    let rows = traj
        .states
        .iter()
        .enumerate()
        .map(|(n, st)| {
            let info = n.checked_sub(1).map(|k| &traj.steps[k]);
            StepRow {
                step: n,
                t: st.t,
                min_s: min_of(&st.s),
                max_s: max_of(&st.s),
                min_b: min_of(&st.b),
                max_b: max_of(&st.b),
                moles_s: mass.moles_s[n],
                moles_b: mass.moles_b[n],
                influx: mass.influx[n],
                outflow: mass.outflow[n],
                residual: mass.residual[n],
                margin_b: linf.margin_b[n],
                margin_s: linf.margin_s[n],
                picard_iterations: info.map_or(0, |i| i.picard_iterations),
                linear_residual: info.map_or(0.0, |i| i.linear_residual),
            }
        })
        .collect();

    let trace_constant = estimate_trace_constant(&model.mesh);
    let negative_flow = config.flow.sup_negative_part(config.horizon) > 0.0;
    let (coercivity_margin, constants, witness, energy) = match &trace_constant {
        Ok(c_t) => {
            let constants = bilinear_constants_report(config, *c_t);
            let witness = bilinear_witness(model, &constants, config.horizon, WITNESS_PAIRS, 0x5eed);
            let energy = (traj.n_steps() > 0).then(|| energy_estimate_report(traj, model, &constants));
            (Some(coercivity_margin(config, *c_t)), Some(constants), Some(witness), energy)
        }
        Err(_) => (None, None, None, None),
    };

    let mut checks = Vec::new();
    let data_signs = config.initial.s.values(model.mesh.n_cells()).iter().chain(&config.initial.b.values(model.mesh.n_cells())).all(|v| *v >= 0.0)
        && config.inlet.values.iter().all(|v| *v >= 0.0);
    let sign_note = || "data or flow rate not nonnegative".to_string();
    checks.push(CheckOutcome {
        name: "nonnegativity",
        property: "S >= 0 and B >= 0 for nonnegative data",
        status: if data_signs && !negative_flow {
            status(nonnegativity.passed, || format!("min S = {:e}, min B = {:e}", nonnegativity.min_s, nonnegativity.min_b))
        } else {
            CheckStatus::NotApplicable(sign_note())
        },
    });
    let divergence_free = config.flow.is_uniform_in_space();
    checks.push(CheckOutcome {
        name: "linf-bound-biomass",
        property: "max B(t) <= ||B_init|| exp(sup mu t)",
        status: if !data_signs || negative_flow {
            CheckStatus::NotApplicable(sign_note())
        } else if !divergence_free {
            CheckStatus::NotApplicable("flow rate varies in space".into())
        } else {
            status(linf.margin_b.iter().all(|m| *m >= 0.0), || format!("min margin {:e}", linf.min_margin_b()))
        },
    });
    checks.push(CheckOutcome {
        name: "linf-bound-substrate",
        property: "max S(t) <= max(||S_init||, sup S_e)",
        status: if !data_signs || negative_flow {
            CheckStatus::NotApplicable(sign_note())
        } else if !divergence_free {
            CheckStatus::NotApplicable("flow rate varies in space".into())
        } else {
            status(linf.margin_s.iter().all(|m| *m >= 0.0), || format!("min margin {:e}", linf.min_margin_s()))
        },
    });
    checks.push(CheckOutcome {
        name: "mass-balance",
        property: "S + B conserved up to boundary fluxes",
        status: status(mass.passed, || format!("relative residual {:e}", mass.relative_residual)),
    });
    checks.push(CheckOutcome {
        name: "coercivity-margin",
        property: "min(D_S, D_B) / C_T^2 > sup Q-",
        status: match (&trace_constant, coercivity_margin) {
            (Ok(_), Some(m)) => status(m > 0.0, || format!("margin {m:e}")),
            (Err(e), _) => CheckStatus::Failed(e.to_string()),
            _ => CheckStatus::NotApplicable("no trace constant".into()),
        },
    });
    checks.push(CheckOutcome {
        name: "bilinear-constants",
        property: "continuity with k, coercivity with alpha and lambda",
        status: match &witness {
            _ if negative_flow => CheckStatus::NotApplicable("negative flow rate".into()),
            Some(Ok(w)) => status(w.passed(), || format!("{} continuity, {} coercivity violations", w.continuity_violations, w.coercivity_violations)),
            Some(Err(e)) => CheckStatus::Failed(e.to_string()),
            None => CheckStatus::NotApplicable("no trace constant".into()),
        },
    });
    checks.push(CheckOutcome {
        name: "energy-estimate",
        property: "weighted L2(H1) energy inequalities and bounds",
        status: match &energy {
            Some(Ok(e)) => status(e.passed(), || "an energy inequality is violated".into()),
            Some(Err(e)) => CheckStatus::NotApplicable(e.to_string()),
            None => CheckStatus::NotApplicable("no time steps".into()),
        },
    });
    if !config.checks.theorems {
        for c in &mut checks {
            if !matches!(c.status, CheckStatus::NotApplicable(_)) {
                c.status = CheckStatus::NotApplicable("checks disabled".into());
            }
        }
    }

    DiagnosticsReport { rows, nonnegativity, linf, mass, trace_constant, coercivity_margin, constants, witness, energy, checks }
}

/// Area-weighted mean substrate over the outlet faces [mol/m³].
pub fn effluent_substrate(mesh: &Mesh, state: &State) -> f64 {
    let (num, den) = mesh.boundary_faces_with(BoundaryTag::Outlet).fold((0.0, 0.0), |(n, d), f| (n + f.area * state.s[f.cell], d + f.area));
    num / den
}

/// Maximum-norm distance of a state from `(S_e, 0)`.
pub fn distance_to_steady(state: &State, s_e: f64) -> f64 {
    state.s.iter().map(|s| (s - s_e).abs()).chain(state.b.iter().map(|b| b.abs())).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::InitialField;
    use crate::discretization::FlowField;
    use crate::geometry::{build_mesh, MeshSpec};

    #[test]
    fn coercivity_margin_arithmetic() {
        let mut c = ScenarioConfig::default();
        c.transport.d_s = 1e-4;
        c.transport.d_b = 1e-4;
        c.transport.strict_flow = false;
        c.flow = FlowField::TimeRamp { q0: -1e-5, q1: 1e-3, ramp_time: 1e9 };
        c.horizon = 1.0;
        let m = coercivity_margin(&c, 2.0);
        assert!((m - 1.5e-5).abs() < 1e-12, "{m}");
        c.flow = FlowField::constant(1e-3);
        assert!((coercivity_margin(&c, 2.0) - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn constants_formulae() {
        let k = SpeciesConstants::new(1.0, 2.0, 1.0);
        assert_eq!(k.k, 5.0);
        assert_eq!(k.epsilon, 1.0);
        assert_eq!(k.alpha1, 0.5);
        assert!((k.delta - 2e-3).abs() < 1e-18);
        assert!((k.lambda - 2.002).abs() < 1e-15);
        let z = SpeciesConstants::new(0.3, 0.0, 1.7);
        assert_eq!(z.k, 0.3);
        assert_eq!(z.alpha1, 0.3);
        assert_eq!(z.lambda, z.delta);
        assert_eq!(z.delta, 1e-3);
    }

    #[test]
    fn trace_constant_positive_and_refines() {
        let mut prev = None;
        for n in [8, 16, 32, 64] {
            let mesh = build_mesh(&MeshSpec::axial(1.0, 0.5, n)).unwrap();
            let c = estimate_trace_constant(&mesh).unwrap();
            assert!(c.is_finite() && c > 0.0);
            if let Some(p) = prev {
                let change: f64 = c - p;
                assert!(change.abs() < 0.05 * c, "{p} -> {c}");
            }
            prev = Some(c);
        }
        let mesh = build_mesh(&MeshSpec::axisymmetric(1.0, 0.5, 8, 4)).unwrap();
        assert!(estimate_trace_constant(&mesh).unwrap() > 0.0);
    }

    #[test]
    fn trace_constant_bounds_boundary_mass() {
        let mesh = build_mesh(&MeshSpec::axisymmetric(2.0, 0.7, 10, 5)).unwrap();
        let c_t = estimate_trace_constant(&mesh).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let u = random_field(&mut rng, &mesh);
            let boundary: f64 = mesh.boundary_faces.iter().map(|f| f.area * u[f.cell] * u[f.cell]).sum();
            assert!(boundary <= c_t * c_t * h1_norm_squared(&mesh, &u) * (1.0 + 1e-7));
        }
    }

    #[test]
    fn zero_data_nonnegativity_exact() {
        let mut c = ScenarioConfig::default();
        c.initial.s = InitialField::Uniform(0.0);
        c.initial.b = InitialField::Uniform(0.0);
        c.inlet = InletSchedule::constant(0.0);
        c.horizon = 200.0;
        let (traj, report) = crate::timestepping::simulate(&c).unwrap();
        assert_eq!(report.nonnegativity.min_s, 0.0);
        assert_eq!(report.nonnegativity.min_b, 0.0);
        let e = report.energy.unwrap().unwrap();
        assert_eq!(e.substrate.lhs, 0.0);
        assert_eq!(e.substrate.rhs, 0.0);
        assert_eq!(e.biomass.lhs, 0.0);
        assert!(traj.states.iter().all(|s| s.s.iter().chain(&s.b).all(|v| *v == 0.0)));
    }

    #[test]
    fn distance_helpers() {
        let st = State { t: 0.0, s: vec![1.0, 0.5], b: vec![0.0, -0.25] };
        assert_eq!(distance_to_steady(&st, 1.0), 0.5);
    }
}
