//! Independent oracles for the solver.
//!
//! * Manufactured solutions: closed-form fields `u*(r, z, t) = e^{-t} P(z) R(r)`
//!   with the volumetric source and inlet flux that make them exact. Errors
//!   are measured against cell averages, which is what a finite-volume
//!   scheme approximates.
//! * [`dense_reference`]: adaptive Dormand–Prince 5(4) on the semi-discrete
//!   nonlinear system, with the true growth rate.
//! * [`matrix_exponential_reference`]: exact propagation of constant-coefficient
//!   linear systems.
//! * [`newton_step`]: the implicit nonlinear step solved by Newton's method on
//!   the dense system.
//! * [`steady_state_constant`]: the exact steady state `S ≡ S_e, B ≡ 0`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::config::ScenarioConfig;
use crate::discretization::{assemble_coupled, assemble_transport, AssemblyError, AssemblyOptions, FlowField, InletSchedule, Scheme};
use crate::geometry::{build_mesh, BoundaryTag, Mesh, MeshError, MeshMode, MeshSpec};
use crate::kinetics::GrowthRateModel;
use crate::linalg::{CsrMatrix, LinearSolveError, LinearSolverOptions, PreparedSystem};
use crate::timestepping::{Model, ReactionCoupling, State, StepInfo, Trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VerificationError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Assembly(#[from] AssemblyError),
    #[error(transparent)]
    Linear(#[from] LinearSolveError),
    #[error("a study needs at least 3 levels, got {0}")]
    TooFewLevels(usize),
    #[error("reference integration limited to 64 cells, mesh has {0}")]
    MeshTooLarge(usize),
    #[error("reference integrator stalled at t = {t} (step {h:e}); the system is too stiff")]
    StiffnessFailure { t: f64, h: f64 },
    #[error("Newton iteration did not converge (last correction {0:e})")]
    NewtonNotConverged(f64),
    #[error("exact steady state needs {0}")]
    NotApplicable(&'static str),
}

// ---------------------------------------------------------------------------
// Manufactured solutions

/// Axial factor `P(z)` of a manufactured field. Both satisfy `P'(0) = 0`, so
/// the outlet condition holds exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxialProfile {
    /// `1 + z² - (2/3) z³ / L`; also `P'(L) = 0`.
    Cubic,
    /// `1 + z²`. Cell averages of a quadratic are reproduced exactly by
    /// two-point fluxes, so only time-stepping error remains when `Q = 0`.
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmsCase {
    pub name: String,
    pub mode: MeshMode,
    pub length: f64,
    pub radius: f64,
    pub diffusion: f64,
    pub q: f64,
    pub scheme: Scheme,
    pub axial: AxialProfile,
    /// Radial factor `1 + β (r² - r⁴ / (2R²))`; zero gives radially uniform fields.
    pub radial_beta: f64,
    pub horizon: f64,
}

const GAUSS3: [(f64, f64); 3] = [(-0.774_596_669_241_483_4, 5.0 / 9.0), (0.0, 8.0 / 9.0), (0.774_596_669_241_483_4, 5.0 / 9.0)];

impl MmsCase {
    /// Diffusion only, central fluxes, on an axisymmetric grid of square cells.
    pub fn diffusion_central() -> Self {
        Self {
            name: "diffusion-central".into(),
            mode: MeshMode::Axisymmetric2D,
            length: 1.0,
            radius: 0.25,
            diffusion: 0.1,
            q: 0.0,
            scheme: Scheme::Central,
            axial: AxialProfile::Cubic,
            radial_beta: 0.5,
            horizon: 0.2,
        }
    }

    /// Advection-dominated transport with upwind fluxes in 1D.
    pub fn advection_upwind() -> Self {
        Self {
            name: "advection-upwind".into(),
            mode: MeshMode::Axial1D,
            length: 1.0,
            radius: 0.5,
            diffusion: 0.01,
            q: 1.0,
            scheme: Scheme::Upwind,
            axial: AxialProfile::Cubic,
            radial_beta: 0.0,
            horizon: 0.2,
        }
    }

    /// Spatially exact field for time-stepping studies.
    pub fn temporal() -> Self {
        Self {
            name: "temporal".into(),
            mode: MeshMode::Axial1D,
            length: 1.0,
            radius: 0.5,
            diffusion: 0.1,
            q: 0.0,
            scheme: Scheme::Upwind,
            axial: AxialProfile::Quadratic,
            radial_beta: 0.0,
            horizon: 1.0,
        }
    }

    fn p(&self, z: f64) -> (f64, f64, f64) {
        match self.axial {
            AxialProfile::Cubic => {
                let l = self.length;
                (1.0 + z * z - 2.0 / 3.0 * z.powi(3) / l, 2.0 * z - 2.0 * z * z / l, 2.0 - 4.0 * z / l)
            }
            AxialProfile::Quadratic => (1.0 + z * z, 2.0 * z, 2.0),
        }
    }

    /// Radial factor and its radial Laplacian `R'' + R'/r`.
    fn rad(&self, r: f64) -> (f64, f64) {
        let (b, rr) = (self.radial_beta, self.radius * self.radius);
        (1.0 + b * (r * r - r.powi(4) / (2.0 * rr)), 4.0 * b - 8.0 * b * r * r / rr)
    }

    pub fn exact(&self, r: f64, z: f64, t: f64) -> f64 {
        (-t).exp() * self.p(z).0 * self.rad(r).0
    }

    /// `u*_t - div(D grad u* - Q u*)` with velocity `(0, 0, -Q)`. Like the
    /// field itself it is `e^{-t}` times a function of space.
    pub fn source(&self, r: f64, z: f64, t: f64) -> f64 {
        let (p, dp, d2p) = self.p(z);
        let (rad, lap_r) = self.rad(r);
        let e = (-t).exp();
        -e * p * rad - self.diffusion * e * (d2p * rad + p * lap_r) - self.q * e * dp * rad
    }

    /// Total influx density `D ∂_z u* + Q u*` at `z = L`.
    pub fn inlet_flux(&self, r: f64, t: f64) -> f64 {
        let (p, dp, _) = self.p(self.length);
        (-t).exp() * self.rad(r).0 * (self.diffusion * dp + self.q * p)
    }

    fn mesh(&self, n_axial: usize) -> Result<Mesh, MeshError> {
        let n_radial = if self.mode == MeshMode::Axisymmetric2D { (n_axial / 4).max(1) } else { 1 };
        build_mesh(&MeshSpec { mode: self.mode, length: self.length, radius: self.radius, n_axial, n_radial })
    }

    /// Cell average of `f(r, z)` by tensor 3-point Gauss rules, `r`-weighted.
    fn cell_average(&self, mesh: &Mesh, cell: usize, f: impl Fn(f64, f64) -> f64) -> f64 {
        let c = &mesh.cells[cell];
        let (z0, z1) = (c.i_axial as f64 * mesh.dz, (c.i_axial + 1) as f64 * mesh.dz);
        let (r0, r1) = (mesh.radial_edges[c.j_radial], mesh.radial_edges[c.j_radial + 1]);
        let radial = self.mode == MeshMode::Axisymmetric2D;
        let (mut num, mut den) = (0.0, 0.0);
        for (xz, wz) in GAUSS3 {
            let z = 0.5 * (z0 + z1) + 0.5 * (z1 - z0) * xz;
            if radial {
                for (xr, wr) in GAUSS3 {
                    let r = 0.5 * (r0 + r1) + 0.5 * (r1 - r0) * xr;
                    num += wz * wr * r * f(r, z);
                    den += wz * wr * r;
                }
            } else {
                num += wz * f(0.0, z);
                den += wz;
            }
        }
        num / den
    }

    /// Largest finite-difference residual of `u*_t - D Δu* - Q ∂_z u* - f`
    /// (relative to the size of the terms) at `points` random space–time
    /// points, and of the inlet identity.
    pub fn consistency_residual(&self, points: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-4;
        let u = |r: f64, z: f64, t: f64| self.exact(r, z, t);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let r = if self.mode == MeshMode::Axisymmetric2D { rng.random_range(0.05..0.95) * self.radius } else { 0.0 };
            let z = rng.random_range(0.05..0.95) * self.length;
            let t = rng.random_range(0.0..self.horizon.max(1e-3));
            let ut = (u(r, z, t + h) - u(r, z, t - h)) / (2.0 * h);
            let uz = (u(r, z + h, t) - u(r, z - h, t)) / (2.0 * h);
            let uzz = (u(r, z + h, t) - 2.0 * u(r, z, t) + u(r, z - h, t)) / (h * h);
            let lap_r = if r > 0.0 {
                let ur = (u(r + h, z, t) - u(r - h, z, t)) / (2.0 * h);
                let urr = (u(r + h, z, t) - 2.0 * u(r, z, t) + u(r - h, z, t)) / (h * h);
                urr + ur / r
            } else {
                0.0
            };
            let terms = [ut, self.diffusion * (uzz + lap_r), self.q * uz];
            let scale = terms.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
            let res = ut - terms[1] - terms[2] - self.source(r, z, t);
            worst = worst.max(res.abs() / scale);
            let zl = self.length;
            let inlet = self.diffusion * (u(r, zl, t) - u(r, zl - h, t) + u(r, zl + h, t) - u(r, zl, t)) / (2.0 * h) + self.q * u(r, zl, t);
            let inlet_scale = inlet.abs().max(u(r, zl, t).abs() * (self.diffusion / self.length + self.q));
            worst = worst.max((inlet - self.inlet_flux(r, t)).abs() / inlet_scale);
        }
        worst
    }

    /// Volume-weighted L² error at the horizon of an implicit Euler run.
    pub fn solve_error(&self, n_axial: usize, n_steps: usize) -> Result<f64, VerificationError> {
        let mesh = self.mesh(n_axial)?;
        let n = mesh.n_cells();
        let dt = self.horizon / n_steps as f64;
        let flow = FlowField::constant(self.q);
        let opts = AssemblyOptions { scheme: self.scheme, strict_flow: true };
        let op = assemble_transport(&mesh, self.diffusion, &flow, 0.0, &opts, 0.0)?;
        let system = PreparedSystem::new(CsrMatrix::identity(n).linear_combination(1.0, &op.matrix, -dt), &LinearSolverOptions::default())?;
        let mut inlet = vec![0.0; n];
        for f in mesh.boundary_faces_with(BoundaryTag::Inlet) {
            inlet[f.cell] += self.inlet_flux(f.center[0], 0.0) * f.area / mesh.cells[f.cell].volume;
        }
        let forcing: Vec<f64> = (0..n).map(|i| self.cell_average(&mesh, i, |r, z| self.source(r, z, 0.0)) + inlet[i]).collect();
        let mut u: Vec<f64> = (0..n).map(|i| self.cell_average(&mesh, i, |r, z| self.exact(r, z, 0.0))).collect();
        for k in 1..=n_steps {
            let decay = (-self.horizon * k as f64 / n_steps as f64).exp();
            let rhs: Vec<f64> = (0..n).map(|i| u[i] + dt * decay * forcing[i]).collect();
            u = system.solve(&rhs, Some(&u))?.0;
        }
        let err: f64 = (0..n)
            .map(|i| {
                let e = u[i] - self.cell_average(&mesh, i, |r, z| self.exact(r, z, self.horizon));
                mesh.cells[i].volume * e * e
            })
            .sum();
        Ok(err.sqrt())
    }
}

/// Time-step rule of a spatial study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DtRule {
    /// `dt = coefficient * h²`, keeping time error below space error.
    Diffusive { coefficient: f64 },
    /// `dt = coefficient * h`, enough when the scheme is first order in space.
    Advective { coefficient: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmsLevel {
    pub level: usize,
    pub h: f64,
    pub dt: f64,
    pub error: f64,
    /// Order between this level and the previous one.
    pub local_order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmsStudy {
    pub case: String,
    pub levels: Vec<MmsLevel>,
    /// Least-squares slope of `log error` against `log h` (or `log dt`).
    pub order: f64,
    /// Errors decrease strictly at each refinement. A study that fails this
    /// is inconclusive and must not be counted as passed.
    pub monotone: bool,
}

impl MmsStudy {
    pub fn conclusive(&self) -> bool {
        self.monotone
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "level,h,dt,error,order")?;
        for l in &self.levels {
            let order = l.local_order.map_or(String::new(), |o| format!("{o:e}"));
            writeln!(out, "{},{:e},{:e},{:e},{}", l.level, l.h, l.dt, l.error, order)?;
        }
        Ok(())
    }
}

fn least_squares_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}

fn study(case: &MmsCase, levels: Vec<MmsLevel>, abscissa: impl Fn(&MmsLevel) -> f64) -> MmsStudy {
    let mut levels = levels;
    for i in 1..levels.len() {
        let ratio = abscissa(&levels[i - 1]) / abscissa(&levels[i]);
        levels[i].local_order = Some((levels[i - 1].error / levels[i].error).ln() / ratio.ln());
    }
    let x: Vec<f64> = levels.iter().map(|l| abscissa(l).ln()).collect();
    let y: Vec<f64> = levels.iter().map(|l| l.error.ln()).collect();
    let monotone = levels.windows(2).all(|w| w[1].error < w[0].error) && levels.iter().all(|l| l.error.is_finite() && l.error > 0.0);
    MmsStudy { case: case.name.clone(), order: least_squares_slope(&x, &y), monotone, levels }
}

/// Spatial convergence study over the given axial resolutions.
pub fn run_mms_study(case: &MmsCase, n_axials: &[usize], dt_rule: DtRule) -> Result<MmsStudy, VerificationError> {
    if n_axials.len() < 3 {
        return Err(VerificationError::TooFewLevels(n_axials.len()));
    }
    let mut levels = Vec::new();
    for (level, &n) in n_axials.iter().enumerate() {
        let h = case.length / n as f64;
        let dt_target = match dt_rule {
            DtRule::Diffusive { coefficient } => coefficient * h * h,
            DtRule::Advective { coefficient } => coefficient * h,
            DtRule::Fixed(dt) => dt,
        };
        let steps = (case.horizon / dt_target).ceil().max(1.0) as usize;
        let error = case.solve_error(n, steps)?;
        levels.push(MmsLevel { level, h, dt: case.horizon / steps as f64, error, local_order: None });
    }
    Ok(study(case, levels, |l| l.h))
}

/// Temporal convergence study on a fixed mesh with the given step counts.
pub fn run_temporal_study(case: &MmsCase, n_axial: usize, step_counts: &[usize]) -> Result<MmsStudy, VerificationError> {
    if step_counts.len() < 3 {
        return Err(VerificationError::TooFewLevels(step_counts.len()));
    }
    let h = case.length / n_axial as f64;
    let mut levels = Vec::new();
    for (level, &steps) in step_counts.iter().enumerate() {
        let error = case.solve_error(n_axial, steps)?;
        levels.push(MmsLevel { level, h, dt: case.horizon / steps as f64, error, local_order: None });
    }
    Ok(study(case, levels, |l| l.dt))
}

/// Required observed order of a study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrderExpectation {
    AtLeast(f64),
    Within { target: f64, tolerance: f64 },
}

impl OrderExpectation {
    /// A study meets the expectation only if it is conclusive.
    pub fn met_by(&self, study: &MmsStudy) -> bool {
        study.conclusive()
            && match *self {
                OrderExpectation::AtLeast(min) => study.order >= min,
                OrderExpectation::Within { target, tolerance } => (study.order - target).abs() <= tolerance,
            }
    }
}

/// The three reference studies: central diffusion in space (order at least
/// 1.8), upwind advection–diffusion in space (1.0 ± 0.2) and implicit Euler
/// in time (1.0 ± 0.15).
pub fn standard_studies() -> Result<Vec<(MmsStudy, OrderExpectation)>, VerificationError> {
    Ok(vec![
        (
            run_mms_study(&MmsCase::diffusion_central(), &[8, 16, 32, 64], DtRule::Diffusive { coefficient: 0.2 })?,
            OrderExpectation::AtLeast(1.8),
        ),
        (
            run_mms_study(&MmsCase::advection_upwind(), &[16, 32, 64, 128], DtRule::Advective { coefficient: 0.05 })?,
            OrderExpectation::Within { target: 1.0, tolerance: 0.2 },
        ),
        (run_temporal_study(&MmsCase::temporal(), 8, &[10, 20, 40, 80])?, OrderExpectation::Within { target: 1.0, tolerance: 0.15 }),
    ])
}

// ---------------------------------------------------------------------------
// Dense reference integration

/// Right-hand side of the semi-discrete nonlinear system.
fn semi_discrete_rhs(model: &Model, t: f64, y: &[f64]) -> Result<Vec<f64>, VerificationError> {
    let n = model.mesh.n_cells();
    let (s, b) = y.split_at(n);
    let rates: Vec<f64> = s.iter().map(|&v| if v.is_finite() { model.kinetics.eval(v).unwrap_or(0.0) } else { f64::NAN }).collect();
    let op = assemble_coupled(&model.mesh, model.d_s, model.d_b, &model.flow, &model.inlet, &rates, t, &model.assembly)
        .map_err(|e| match e {
            AssemblyError::NonFiniteRate(_) => VerificationError::StiffnessFailure { t, h: f64::NAN },
            other => other.into(),
        })?;
    let (ds, db) = op.apply(s, b);
    Ok(ds.into_iter().chain(db).collect())
}

const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_E: [f64; 7] = [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];

/// Integrates the semi-discrete nonlinear system (true growth rate, no step
/// coupling) with adaptive Dormand–Prince 5(4), stopping exactly at each of
/// `times` (increasing, after `initial.t`).
pub fn dense_reference(model: &Model, initial: &State, times: &[f64], rtol: f64) -> Result<Trajectory, VerificationError> {
    let n = model.mesh.n_cells();
    if n > 64 {
        return Err(VerificationError::MeshTooLarge(n));
    }
    let scale = initial.s.iter().chain(&initial.b).fold(model.inlet.sup(times.last().copied().unwrap_or(0.0)), |m, v| m.max(v.abs())).max(1e-300);
    let atol = rtol * scale;
    let mut y: Vec<f64> = initial.s.iter().chain(&initial.b).copied().collect();
    let mut t = initial.t;
    let mut k1 = semi_discrete_rhs(model, t, &y)?;
    let mut h = times.first().map_or(1.0, |t1| (t1 - t).abs() * 1e-3).max(1e-12);
    let mut states = vec![initial.clone()];
    for &target in times {
        while t < target {
            let last = target - t <= h * (1.0 + 1e-12);
            let step = if last { target - t } else { h };
            let mut k = vec![k1.clone()];
            for stage in 1..7 {
                let yi: Vec<f64> = (0..2 * n).map(|i| y[i] + step * (0..stage).map(|j| DP_A[stage][j] * k[j][i]).sum::<f64>()).collect();
                k.push(semi_discrete_rhs(model, t + DP_C[stage] * step, &yi)?);
            }
            let y_new: Vec<f64> = (0..2 * n).map(|i| y[i] + step * (0..6).map(|j| DP_A[6][j] * k[j][i]).sum::<f64>()).collect();
            let err = ((0..2 * n)
                .map(|i| {
                    let e = step * (0..7).map(|j| DP_E[j] * k[j][i]).sum::<f64>();
                    let sc = atol + rtol * y[i].abs().max(y_new[i].abs());
                    (e / sc).powi(2)
                })
                .sum::<f64>()
                / (2 * n) as f64)
                .sqrt();
            if err <= 1.0 {
                t = if last { target } else { t + step };
                y = y_new;
                k1 = k[6].clone();
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            h = step * factor;
            if h < 1e-14 * t.abs().max(1.0) || !err.is_finite() {
                return Err(VerificationError::StiffnessFailure { t, h });
            }
        }
        let (s, b) = y.split_at(n);
        states.push(State { t, s: s.to_vec(), b: b.to_vec() });
    }
    let dt = if times.len() > 1 { times[1] - times[0] } else { times.first().map_or(0.0, |t1| t1 - initial.t) };
    let steps = states[1..].iter().map(|s| StepInfo { t: s.t, ..Default::default() }).collect();
    Ok(Trajectory { dt, states, steps, outer_history: Vec::new() })
}

/// Exact solution at `times` of the linear system with constant coefficient
/// `c` and time-independent flow and inlet data, via the exponential of the
/// source-augmented block matrix.
pub fn matrix_exponential_reference(model: &Model, initial: &State, c: &[f64], times: &[f64]) -> Result<Vec<State>, VerificationError> {
    let n = model.mesh.n_cells();
    let op = assemble_coupled(&model.mesh, model.d_s, model.d_b, &model.flow, &model.inlet, c, initial.t, &model.assembly)?;
    let a = op.matrix().to_dense();
    let src = op.source();
    let mut aug = DMatrix::<f64>::zeros(2 * n + 1, 2 * n + 1);
    aug.view_mut((0, 0), (2 * n, 2 * n)).copy_from(&a);
    for i in 0..2 * n {
        aug[(i, 2 * n)] = src[i];
    }
    let y0 = DVector::from_iterator(2 * n + 1, initial.s.iter().chain(&initial.b).copied().chain(std::iter::once(1.0)));
    Ok(times
        .iter()
        .map(|&t| {
            let y = (&aug * (t - initial.t)).exp() * &y0;
            State { t, s: y.rows(0, n).iter().copied().collect(), b: y.rows(n, n).iter().copied().collect() }
        })
        .collect())
}

/// Solves the implicit nonlinear step
/// `S - dt(L_S S + src) + dt c(S) B = S^n`, `B - dt L_B B - dt c(S) B = B^n`
/// with `c(S) = coupling(μ(S))` by Newton's method on the dense system.
pub fn newton_step(model: &Model, state: &State, dt: f64, coupling: ReactionCoupling) -> Result<State, VerificationError> {
    let n = model.mesh.n_cells();
    let t1 = state.t + dt;
    let s_op = assemble_transport(&model.mesh, model.d_s, &model.flow, t1, &model.assembly, model.inlet.eval(t1))?;
    let b_op = assemble_transport(&model.mesh, model.d_b, &model.flow, t1, &model.assembly, 0.0)?;
    let (ls, lb) = (s_op.matrix.to_dense(), b_op.matrix.to_dense());
    let rate = |s: f64| coupling.coefficient(model.kinetics.eval(s).unwrap_or(0.0), dt);
    let drate = |s: f64| {
        let h = 1e-7 * s.abs().max(1e-3);
        (rate(s + h) - rate(s - h)) / (2.0 * h)
    };
    let mut s = DVector::from_column_slice(&state.s);
    let mut b = DVector::from_column_slice(&state.b);
    let s_prev = DVector::from_column_slice(&state.s);
    let b_prev = DVector::from_column_slice(&state.b);
    let src = DVector::from_column_slice(&s_op.source);
    let mut last = f64::INFINITY;
    for _ in 0..50 {
        let c = DVector::from_iterator(n, s.iter().map(|&v| rate(v)));
        let cb = c.component_mul(&b);
        let fs = &s - &s_prev - (&ls * &s + &src) * dt + &cb * dt;
        let fb = &b - &b_prev - (&lb * &b) * dt - &cb * dt;
        let mut jac = DMatrix::<f64>::zeros(2 * n, 2 * n);
        jac.view_mut((0, 0), (n, n)).copy_from(&(DMatrix::identity(n, n) - &ls * dt));
        jac.view_mut((n, n), (n, n)).copy_from(&(DMatrix::identity(n, n) - &lb * dt));
        for i in 0..n {
            let dc = drate(s[i]);
            jac[(i, i)] += dt * dc * b[i];
            jac[(i, n + i)] += dt * c[i];
            jac[(n + i, i)] -= dt * dc * b[i];
            jac[(n + i, n + i)] -= dt * c[i];
        }
        let f = DVector::from_iterator(2 * n, fs.iter().chain(fb.iter()).copied());
        let delta = jac.lu().solve(&f).ok_or(VerificationError::NewtonNotConverged(f64::NAN))?;
        s -= delta.rows(0, n);
        b -= delta.rows(n, n);
        last = delta.amax();
        let scale = s.amax().max(b.amax()).max(1e-300);
        if last <= 1e-14 * scale {
            return Ok(State { t: t1, s: s.iter().copied().collect(), b: b.iter().copied().collect() });
        }
    }
    Err(VerificationError::NewtonNotConverged(last))
}

/// The exact steady state of a constant-coefficient scenario without
/// growth: `S ≡ S_e`, `B ≡ 0`.
pub fn steady_state_constant(config: &ScenarioConfig) -> Result<State, VerificationError> {
    let FlowField::Constant { q0 } = config.flow else {
        return Err(VerificationError::NotApplicable("a constant flow rate"));
    };
    if !config.inlet.is_constant() {
        return Err(VerificationError::NotApplicable("a constant inlet concentration"));
    }
    let b_zero = config.initial.b.sup_abs() == 0.0;
    if config.kinetics != GrowthRateModel::Zero && !b_zero {
        return Err(VerificationError::NotApplicable("zero kinetics or zero initial biomass"));
    }
    if q0 <= 0.0 && !b_zero {
        return Err(VerificationError::NotApplicable("a positive flow rate to wash out biomass"));
    }
    let n = config.mesh.n_cells();
    Ok(State { t: f64::INFINITY, s: vec![config.inlet.values[0]; n], b: vec![0.0; n] })
}

/// `L / Q`, the time a fluid parcel spends in the reactor.
pub fn residence_time(config: &ScenarioConfig) -> f64 {
    config.mesh.length / config.flow.sup(0.0)
}

// ---------------------------------------------------------------------------
// Randomized admissible scenarios

/// A random admissible scenario: upwind fluxes, nonnegative data, a flow rate
/// that is nonnegative and uniform in space, Monod, Haldane or capped-linear
/// growth, and `dt * sup μ < 1`. Sizes stay small (at most 96 cells and 60
/// steps) so that suites of dozens run in seconds.
pub fn fuzz_scenario(rng: &mut impl Rng) -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    let length = rng.random_range(0.2..2.0);
    let radius = rng.random_range(0.02..0.3);
    c.mesh = if rng.random_bool(0.7) {
        MeshSpec::axial(length, radius, rng.random_range(4..=48))
    } else {
        MeshSpec::axisymmetric(length, radius, rng.random_range(4..=24), rng.random_range(1..=4))
    };
    let log_uniform = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| (rng.random_range(lo.ln()..hi.ln())).exp();
    c.transport.d_s = log_uniform(rng, 1e-6, 1e-3);
    c.transport.d_b = log_uniform(rng, 1e-6, 1e-3);
    c.transport.scheme = Scheme::Upwind;
    let q0 = if rng.random_bool(0.15) { 0.0 } else { log_uniform(rng, 1e-5, 5e-3) };
    c.flow = if rng.random_bool(0.3) {
        FlowField::TimeRamp { q0, q1: log_uniform(rng, 1e-5, 5e-3), ramp_time: rng.random_range(10.0..1000.0) }
    } else {
        FlowField::Constant { q0 }
    };
    let n_inlet = rng.random_range(1..=3);
    let mut t = 0.0;
    let mut times = vec![t];
    for _ in 1..n_inlet {
        t += rng.random_range(50.0..400.0);
        times.push(t);
    }
    let values = times.iter().map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..5.0) }).collect();
    c.inlet = InletSchedule { times, values };
    let n = c.mesh.n_cells();
    let field = |rng: &mut dyn rand::RngCore, hi: f64| {
        if rng.random_bool(0.5) {
            crate::config::InitialField::Uniform(rng.random_range(0.0..hi))
        } else {
            crate::config::InitialField::PerCell((0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..hi) }).collect())
        }
    };
    c.initial.s = field(rng, 5.0);
    c.initial.b = field(rng, 1.0);
    let mu = log_uniform(rng, 1e-4, 1e-2);
    c.kinetics = match rng.random_range(0..3) {
        0 => GrowthRateModel::monod(mu, rng.random_range(0.05..2.0)),
        1 => GrowthRateModel::haldane(mu, rng.random_range(0.05..2.0), rng.random_range(0.2..5.0)),
        _ => GrowthRateModel::capped_linear(mu / rng.random_range(0.2..3.0), mu),
    };
    let steps = rng.random_range(5..=60);
    let dt = rng.random_range(0.05..0.95) / c.kinetics.sup();
    c.horizon = dt * steps as f64;
    c.solver.dt = dt;
    c
}

/// `count` scenarios from [`fuzz_scenario`] with a fixed seed.
pub fn fuzz_suite(seed: u64, count: usize) -> Vec<ScenarioConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| fuzz_scenario(&mut rng)).collect()
}
