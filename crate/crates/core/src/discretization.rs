//! Cell-centred finite-volume assembly of `div(D grad u - Q u)`.
//!
//! The velocity is `(0, 0, -Q(x, t))`, i.e. downward with speed `Q >= 0`.
//! Operators are returned per unit volume, so that the semi-discrete
//! transport equation reads `du/dt = L u + source`.
//!
//! Faces are treated as follows:
//!
//! * interior faces: two-point diffusive flux `D A (u_b - u_a) / h` plus an
//!   advective flux, first-order upwind or central average;
//! * inlet faces: the total (advective + diffusive) flux is prescribed. For
//!   the substrate it equals `Q S_e A` and enters as a source; for biomass it
//!   is zero. No unknown is attached to the inlet face;
//! * outlet faces: zero diffusive flux, advective outflow `Q A u_cell` kept
//!   implicit on the diagonal, with the owner value whatever the scheme;
//! * wall faces: zero total flux. The velocity is axial, so the advective
//!   wall term vanishes anyway.
//!
//! `Q` is sampled at face centres. No divergence constraint is imposed on it.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::geometry::{BoundaryTag, Mesh};
use crate::linalg::CsrMatrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AssemblyError {
    #[error("diffusion coefficient must be positive and finite, got {0}")]
    NonPositiveDiffusion(f64),
    #[error("negative flow rate {q} sampled at z = {z}, t = {t}")]
    NegativeFlow { q: f64, z: f64, t: f64 },
    #[error("reaction field has {got} entries, mesh has {expected} cells")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("reaction coefficient is not finite in cell {0}")]
    NonFiniteRate(usize),
    #[error("invalid flow profile: {0}")]
    InvalidFlow(String),
    #[error("invalid inlet schedule: {0}")]
    InvalidSchedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// First-order upwind. Positivity preserving.
    #[default]
    Upwind,
    /// Central averaging. Second order, but may oscillate once the face
    /// Péclet number `Q h / D` exceeds 2.
    Central,
}

/// Flow rate `Q(x, t) [m/s]`, the downward speed of the carrier fluid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowField {
    Constant { q0: f64 },
    /// `q0 + (q1 - q0) * min(t / ramp_time, 1)`.
    TimeRamp { q0: f64, q1: f64, ramp_time: f64 },
    /// Bilinear interpolation of `values[k][i] = Q(z[i], t[k])`, clamped
    /// outside the sampled rectangle.
    AxiallyVarying { z: Vec<f64>, t: Vec<f64>, values: Vec<Vec<f64>> },
}

impl Default for FlowField {
    fn default() -> Self {
        FlowField::Constant { q0: 1e-3 }
    }
}

/// Index and weight for piecewise-linear interpolation on sorted knots.
fn bracket(knots: &[f64], x: f64) -> (usize, usize, f64) {
    let n = knots.len();
    if n == 1 || x <= knots[0] {
        return (0, 0, 0.0);
    }
    if x >= knots[n - 1] {
        return (n - 1, n - 1, 0.0);
    }
    let hi = knots.partition_point(|&k| k <= x).min(n - 1);
    let lo = hi - 1;
    (lo, hi, (x - knots[lo]) / (knots[hi] - knots[lo]))
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite()) && v.windows(2).all(|w| w[0] < w[1])
}

impl FlowField {
    pub fn constant(q0: f64) -> Self {
        FlowField::Constant { q0 }
    }

    pub fn validate(&self) -> Result<(), AssemblyError> {
        let bad = |m: &str| Err(AssemblyError::InvalidFlow(m.to_string()));
        match self {
            FlowField::Constant { q0 } if !q0.is_finite() => bad("q0 must be finite"),
            FlowField::TimeRamp { q0, q1, ramp_time } => {
                if !(q0.is_finite() && q1.is_finite()) {
                    bad("q0 and q1 must be finite")
                } else if !(ramp_time.is_finite() && *ramp_time > 0.0) {
                    bad("ramp_time must be positive")
                } else {
                    Ok(())
                }
            }
            FlowField::AxiallyVarying { z, t, values } => {
                if z.is_empty() || t.is_empty() {
                    bad("sample axes must be non-empty")
                } else if !strictly_increasing(z) || !strictly_increasing(t) {
                    bad("sample axes must be strictly increasing")
                } else if values.len() != t.len() || values.iter().any(|row| row.len() != z.len()) {
                    bad("values must be a t-by-z table")
                } else if values.iter().flatten().any(|v| !v.is_finite()) {
                    bad("values must be finite")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, z: f64, t: f64) -> f64 {
        match self {
            FlowField::Constant { q0 } => *q0,
            FlowField::TimeRamp { q0, q1, ramp_time } => q0 + (q1 - q0) * (t / ramp_time).clamp(0.0, 1.0),
            FlowField::AxiallyVarying { z: zs, t: ts, values } => {
                let (k0, k1, wt) = bracket(ts, t);
                let (i0, i1, wz) = bracket(zs, z);
                let row = |k: usize| values[k][i0] * (1.0 - wz) + values[k][i1] * wz;
                row(k0) * (1.0 - wt) + row(k1) * wt
            }
        }
    }

    /// Whether `Q` is independent of position.
    pub fn is_uniform_in_space(&self) -> bool {
        !matches!(self, FlowField::AxiallyVarying { z, .. } if z.len() > 1)
    }

    /// Extreme values of `Q` over `[0, horizon]` (all positions).
    fn range(&self, horizon: f64) -> (f64, f64) {
        match self {
            FlowField::Constant { q0 } => (*q0, *q0),
            FlowField::TimeRamp { .. } => {
                let (a, b) = (self.eval(0.0, 0.0), self.eval(0.0, horizon));
                (a.min(b), a.max(b))
            }
            FlowField::AxiallyVarying { z, t, values } => {
                // Bilinear interpolants attain their extremes on sample
                // columns; clip the time axis at 0 and the horizon.
                let mut rows: Vec<Vec<f64>> = t
                    .iter()
                    .zip(values)
                    .filter(|(tk, _)| **tk > 0.0 && **tk < horizon)
                    .map(|(_, row)| row.clone())
                    .collect();
                for tb in [0.0, horizon] {
                    rows.push(z.iter().map(|&zi| self.eval(zi, tb)).collect());
                }
                let all = rows.iter().flatten().copied();
                let lo = all.clone().fold(f64::INFINITY, f64::min);
                let hi = all.fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        }
    }

    /// `sup |Q|` over the reactor and `[0, horizon]`.
    pub fn sup(&self, horizon: f64) -> f64 {
        let (lo, hi) = self.range(horizon);
        lo.abs().max(hi.abs())
    }

    /// `sup max(-Q, 0)` over the reactor and `[0, horizon]`.
    pub fn sup_negative_part(&self, horizon: f64) -> f64 {
        (-self.range(horizon).0).max(0.0)
    }
}

/// Inlet substrate concentration `S_e(t) [mol/m³]`, piecewise linear in time
/// and constant beyond the first and last samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InletSchedule {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Default for InletSchedule {
    fn default() -> Self {
        Self::constant(1.0)
    }
}

impl InletSchedule {
    pub fn constant(value: f64) -> Self {
        Self { times: vec![0.0], values: vec![value] }
    }

    pub fn validate(&self) -> Result<(), AssemblyError> {
        if self.times.is_empty() || self.times.len() != self.values.len() {
            return Err(AssemblyError::InvalidSchedule("times and values must be non-empty and of equal length".into()));
        }
        if !strictly_increasing(&self.times) {
            return Err(AssemblyError::InvalidSchedule("times must be strictly increasing".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(AssemblyError::InvalidSchedule("values must be finite".into()));
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> f64 {
        let (lo, hi, w) = bracket(&self.times, t);
        self.values[lo] * (1.0 - w) + self.values[hi] * w
    }

    pub fn is_constant(&self) -> bool {
        self.values.windows(2).all(|w| w[0] == w[1])
    }

    /// Knots of the interpolant restricted to `[0, horizon]`, endpoints included.
    fn knots_on(&self, horizon: f64) -> Vec<f64> {
        let mut k = vec![0.0];
        k.extend(self.times.iter().copied().filter(|&t| t > 0.0 && t < horizon));
        if horizon > 0.0 {
            k.push(horizon);
        }
        k
    }

    /// `sup |S_e|` over `[0, horizon]`.
    pub fn sup(&self, horizon: f64) -> f64 {
        self.knots_on(horizon).into_iter().map(|t| self.eval(t).abs()).fold(0.0, f64::max)
    }

    pub fn min(&self, horizon: f64) -> f64 {
        self.knots_on(horizon).into_iter().map(|t| self.eval(t)).fold(f64::INFINITY, f64::min)
    }

    /// `||S_e||_{L²(0, horizon)}`, exact for the piecewise-linear interpolant.
    pub fn l2_norm(&self, horizon: f64) -> f64 {
        let k = self.knots_on(horizon);
        k.windows(2)
            .map(|w| {
                let (a, b) = (self.eval(w[0]), self.eval(w[1]));
                (w[1] - w[0]) * (a * a + a * b + b * b) / 3.0
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssemblyOptions {
    pub scheme: Scheme,
    /// Reject negative sampled flow rates.
    pub strict_flow: bool,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self { scheme: Scheme::Upwind, strict_flow: true }
    }
}

/// What enters through the inlet faces.
pub enum InletCondition<'a> {
    /// Danckwerts influx `Q S_e` with the given inlet concentration.
    Concentration(f64),
    /// Prescribed total influx density [mol/(m² s)] as a function of the face
    /// centre `[r, z]`. Used by manufactured-solution studies.
    Flux(&'a dyn Fn([f64; 2]) -> f64),
}

/// Semi-discrete transport operator `du/dt = matrix * u + source`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportOperator {
    /// Per-volume coefficients [1/s].
    pub matrix: CsrMatrix,
    /// Per-volume boundary source [mol/(m³ s)].
    pub source: Vec<f64>,
    pub t: f64,
    pub scheme: Scheme,
}

impl TransportOperator {
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let mut out = self.matrix.mul_vec(u);
        for (o, s) in out.iter_mut().zip(&self.source) {
            *o += s;
        }
        out
    }

    /// The discrete form `a_h(p, v) = -sum_i V_i v_i (L p)_i`: diffusion,
    /// advection and the outlet term, without the inlet source.
    pub fn bilinear(&self, volumes: &[f64], p: &[f64], v: &[f64]) -> f64 {
        let lp = self.matrix.mul_vec(p);
        -lp.iter().zip(v).zip(volumes).map(|((l, vi), w)| w * l * vi).sum::<f64>()
    }
}

fn check_diffusion(d: f64) -> Result<(), AssemblyError> {
    if d.is_finite() && d > 0.0 {
        Ok(())
    } else {
        Err(AssemblyError::NonPositiveDiffusion(d))
    }
}

/// Assembles the transport operator for one species with a Danckwerts inlet
/// carrying `inlet_concentration` (zero for biomass).
pub fn assemble_transport(
    mesh: &Mesh,
    diffusion: f64,
    flow: &FlowField,
    t: f64,
    opts: &AssemblyOptions,
    inlet_concentration: f64,
) -> Result<TransportOperator, AssemblyError> {
    assemble_transport_with_inlet(mesh, diffusion, flow, t, opts, InletCondition::Concentration(inlet_concentration))
}

pub fn assemble_transport_with_inlet(
    mesh: &Mesh,
    diffusion: f64,
    flow: &FlowField,
    t: f64,
    opts: &AssemblyOptions,
    inlet: InletCondition<'_>,
) -> Result<TransportOperator, AssemblyError> {
    check_diffusion(diffusion)?;
    let n = mesh.n_cells();
    let sample = |center: [f64; 2]| -> Result<f64, AssemblyError> {
        let q = flow.eval(center[1], t);
        if opts.strict_flow && q < 0.0 {
            return Err(AssemblyError::NegativeFlow { q, z: center[1], t });
        }
        Ok(q)
    };

    // Volume-integrated flux coefficients [m³/s].
    let mut triplets = Vec::with_capacity(4 * mesh.interior_faces.len() + n);
    let mut source = vec![0.0; n];
    for f in &mesh.interior_faces {
        let (a, b) = f.cells;
        let g = diffusion * f.area / f.distance;
        triplets.extend([(a, a, -g), (a, b, g), (b, b, -g), (b, a, g)]);
        if f.normal[1] == 0.0 {
            continue;
        }
        // Volumetric flux from a to b of the velocity (0, 0, -Q).
        let flux = -sample(f.center)? * f.normal[1] * f.area;
        match opts.scheme {
            Scheme::Upwind => {
                let (up, down, w) = if flux >= 0.0 { (a, b, flux) } else { (b, a, -flux) };
                triplets.extend([(up, up, -w), (down, up, w)]);
            }
            Scheme::Central => {
                let h = 0.5 * flux;
                triplets.extend([(a, a, -h), (a, b, -h), (b, a, h), (b, b, h)]);
            }
        }
    }
    for f in &mesh.boundary_faces {
        match f.tag {
            BoundaryTag::Outlet => {
                let q = sample(f.center)?;
                triplets.push((f.cell, f.cell, -q * f.area));
            }
            BoundaryTag::Inlet => {
                let influx = match &inlet {
                    InletCondition::Concentration(s_e) => sample(f.center)? * s_e,
                    InletCondition::Flux(g) => g(f.center),
                };
                source[f.cell] += influx * f.area;
            }
            BoundaryTag::Wall => {}
        }
    }

    let inv_vol: Vec<f64> = mesh.cells.iter().map(|c| 1.0 / c.volume).collect();
    for (s, w) in source.iter_mut().zip(&inv_vol) {
        *s *= w;
    }
    let matrix = CsrMatrix::from_triplets(n, &triplets).scale_rows(&inv_vol);
    Ok(TransportOperator { matrix, source, t, scheme: opts.scheme })
}

/// Stacked operator for `(S, B)` with a frozen reaction coefficient `c`:
///
/// ```text
/// d/dt [S]   [L_S   -diag(c)    ] [S]   [src_S]
///      [B] = [0     L_B + diag(c)] [B] + [0    ]
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledOperator {
    pub substrate: TransportOperator,
    pub biomass: TransportOperator,
    pub rate: Vec<f64>,
}

impl CoupledOperator {
    pub fn n_cells(&self) -> usize {
        self.rate.len()
    }

    /// The full `2N x 2N` block matrix.
    pub fn matrix(&self) -> CsrMatrix {
        let n = self.n_cells();
        let mut t: Vec<(usize, usize, f64)> = self.substrate.matrix.triplets().collect();
        t.extend(self.biomass.matrix.triplets().map(|(i, j, v)| (i + n, j + n, v)));
        for (i, &c) in self.rate.iter().enumerate() {
            t.push((i, i + n, -c));
            t.push((i + n, i + n, c));
        }
        CsrMatrix::from_triplets(2 * n, &t)
    }

    pub fn source(&self) -> Vec<f64> {
        let mut s = self.substrate.source.clone();
        s.extend(std::iter::repeat_n(0.0, self.n_cells()));
        s
    }

    /// Time derivatives `(dS/dt, dB/dt)`.
    pub fn apply(&self, s: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut ds = self.substrate.apply(s);
        let mut db = self.biomass.apply(b);
        for i in 0..self.n_cells() {
            let reaction = self.rate[i] * b[i];
            ds[i] -= reaction;
            db[i] += reaction;
        }
        (ds, db)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn assemble_coupled(
    mesh: &Mesh,
    d_s: f64,
    d_b: f64,
    flow: &FlowField,
    schedule: &InletSchedule,
    rate: &[f64],
    t: f64,
    opts: &AssemblyOptions,
) -> Result<CoupledOperator, AssemblyError> {
    if rate.len() != mesh.n_cells() {
        return Err(AssemblyError::DimensionMismatch { expected: mesh.n_cells(), got: rate.len() });
    }
    if let Some(i) = rate.iter().position(|c| !c.is_finite()) {
        return Err(AssemblyError::NonFiniteRate(i));
    }
    let substrate = assemble_transport(mesh, d_s, flow, t, opts, schedule.eval(t))?;
    let biomass = assemble_transport(mesh, d_b, flow, t, opts, 0.0)?;
    Ok(CoupledOperator { substrate, biomass, rate: rate.to_vec() })
}

/// Total inflow `sum Q S_e A` through the inlet [mol/s].
pub fn inlet_influx(mesh: &Mesh, flow: &FlowField, t: f64, s_e: f64) -> f64 {
    mesh.boundary_faces_with(BoundaryTag::Inlet).map(|f| flow.eval(f.center[1], t) * s_e * f.area).sum()
}

/// Total advective outflow `sum Q u_cell A` through the outlet [mol/s].
pub fn outlet_outflow(mesh: &Mesh, flow: &FlowField, t: f64, u: &[f64]) -> f64 {
    mesh.boundary_faces_with(BoundaryTag::Outlet).map(|f| flow.eval(f.center[1], t) * u[f.cell] * f.area).sum()
}

/// Writes `row col value` lines, one per stored entry.
pub fn write_triplets<W: Write>(matrix: &CsrMatrix, mut out: W) -> std::io::Result<()> {
    writeln!(out, "# {} x {} nnz={}", matrix.dim(), matrix.dim(), matrix.nnz())?;
    for (i, j, v) in matrix.triplets() {
        writeln!(out, "{i} {j} {v:e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_mesh, MeshSpec};

    fn meshes() -> Vec<Mesh> {
        [MeshSpec::axial(1.0, 1.0, 3), MeshSpec::axial(2.0, 0.2, 11), MeshSpec::axisymmetric(1.5, 0.4, 6, 4)]
            .iter()
            .map(|s| build_mesh(s).unwrap())
            .collect()
    }

    #[test]
    fn golden_three_cell_upwind_stencil() {
        // Hand assembly: dz = 1/3, A = π, V = π/3, D A / h = 3π, Q A = π.
        // Rows are scaled by 1/V = 3/π.
        let mesh = build_mesh(&MeshSpec::axial(1.0, 1.0, 3)).unwrap();
        let op = assemble_transport(&mesh, 1.0, &FlowField::constant(1.0), 0.0, &AssemblyOptions::default(), 2.0).unwrap();
        let expected = [[-12.0, 12.0, 0.0], [9.0, -21.0, 12.0], [0.0, 9.0, -12.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((op.matrix.get(i, j) - expected[i][j]).abs() < 1e-12, "({i},{j})");
            }
        }
        let expected_source = [0.0, 0.0, 3.0 * 2.0];
        for i in 0..3 {
            assert!((op.source[i] - expected_source[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn no_flow_rows_sum_to_zero() {
        for mesh in meshes() {
            for scheme in [Scheme::Upwind, Scheme::Central] {
                let opts = AssemblyOptions { scheme, strict_flow: true };
                let op = assemble_transport(&mesh, 0.37, &FlowField::constant(0.0), 0.0, &opts, 1.0).unwrap();
                for i in 0..mesh.n_cells() {
                    let diag = op.matrix.get(i, i).abs();
                    let sum: f64 = op.matrix.row(i).map(|(_, v)| v).sum();
                    assert!(sum.abs() <= 1e-12 * diag);
                }
            }
        }
    }

    #[test]
    fn inlet_concentration_is_steady() {
        for mesh in meshes() {
            for scheme in [Scheme::Upwind, Scheme::Central] {
                let opts = AssemblyOptions { scheme, strict_flow: true };
                let s_e = 2.5;
                let op = assemble_transport(&mesh, 0.01, &FlowField::constant(0.3), 0.0, &opts, s_e).unwrap();
                let u = vec![s_e; mesh.n_cells()];
                let r = op.apply(&u);
                let scale = op.matrix.diagonal().iter().fold(0.0f64, |m, d| m.max(d.abs())) * s_e;
                for ri in r {
                    assert!(ri.abs() <= 1e-12 * scale, "{ri}");
                }
            }
        }
    }

    #[test]
    fn upwind_has_m_matrix_sign_pattern() {
        let flow = FlowField::AxiallyVarying { z: vec![0.0, 1.5], t: vec![0.0], values: vec![vec![0.2, 0.9]] };
        for mesh in meshes() {
            let op = assemble_transport(&mesh, 0.05, &flow, 0.0, &AssemblyOptions::default(), 1.0).unwrap();
            for (i, j, v) in op.matrix.triplets() {
                if i == j {
                    assert!(v <= 0.0);
                } else {
                    assert!(v >= 0.0);
                }
            }
            // (I - dt L) is a Z-matrix, column dominant once weighted by volume.
            let dt = 1e3;
            let vols = mesh.volumes();
            let n = mesh.n_cells();
            let mut col_off = vec![0.0; n];
            let mut col_diag = vec![0.0; n];
            for (i, j, v) in op.matrix.triplets() {
                let m = if i == j { vols[i] * (1.0 - dt * v) } else { -vols[i] * dt * v };
                if i == j {
                    col_diag[j] = m;
                } else {
                    assert!(m <= 0.0);
                    col_off[j] += m.abs();
                }
            }
            for j in 0..n {
                assert!(col_diag[j] >= col_off[j]);
            }
        }
    }

    #[test]
    fn discrete_conservation_matches_boundary_fluxes() {
        let flow = FlowField::AxiallyVarying { z: vec![0.0, 1.0, 2.0], t: vec![0.0], values: vec![vec![0.4, 0.1, 0.7]] };
        for mesh in meshes() {
            for scheme in [Scheme::Upwind, Scheme::Central] {
                let opts = AssemblyOptions { scheme, strict_flow: true };
                let s_e = 1.7;
                let op = assemble_transport(&mesh, 0.02, &flow, 0.0, &opts, s_e).unwrap();
                let u: Vec<f64> = (0..mesh.n_cells()).map(|i| 1.0 + (i as f64 * 0.7).sin()).collect();
                let lu = op.apply(&u);
                let total: f64 = lu.iter().zip(mesh.volumes()).map(|(l, v)| l * v).sum();
                let boundary = inlet_influx(&mesh, &flow, 0.0, s_e) - outlet_outflow(&mesh, &flow, 0.0, &u);
                assert!((total - boundary).abs() <= 1e-10 * boundary.abs().max(1e-300) + 1e-14);
            }
        }
    }

    #[test]
    fn coupled_reduces_to_blocks_without_reaction() {
        let mesh = build_mesh(&MeshSpec::axial(1.0, 0.5, 5)).unwrap();
        let flow = FlowField::constant(0.1);
        let sched = InletSchedule::constant(2.0);
        let opts = AssemblyOptions::default();
        let op = assemble_coupled(&mesh, 0.1, 0.2, &flow, &sched, &vec![0.0; 5], 0.0, &opts).unwrap();
        let s_op = assemble_transport(&mesh, 0.1, &flow, 0.0, &opts, 2.0).unwrap();
        let b_op = assemble_transport(&mesh, 0.2, &flow, 0.0, &opts, 0.0).unwrap();
        let m = op.matrix();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.get(i, j), s_op.matrix.get(i, j));
                assert_eq!(m.get(i + 5, j + 5), b_op.matrix.get(i, j));
                assert_eq!(m.get(i, j + 5), 0.0);
                assert_eq!(m.get(i + 5, j), 0.0);
            }
        }
        assert_eq!(op.source()[..5], s_op.source[..]);
    }

    #[test]
    fn uniform_reaction_cancels_in_sum() {
        let mesh = build_mesh(&MeshSpec::axial(1.0, 0.5, 4)).unwrap();
        let op = assemble_coupled(
            &mesh,
            0.1,
            0.1,
            &FlowField::constant(0.0),
            &InletSchedule::constant(0.0),
            &[0.8; 4],
            0.0,
            &AssemblyOptions::default(),
        )
        .unwrap();
        let (ds, db) = op.apply(&[1.3; 4], &[0.6; 4]);
        for i in 0..4 {
            assert!((ds[i] + db[i]).abs() < 1e-15);
            assert!((db[i] - 0.8 * 0.6).abs() < 1e-15);
        }
    }

    #[test]
    fn assembly_errors() {
        let mesh = build_mesh(&MeshSpec::axial(1.0, 0.5, 4)).unwrap();
        let opts = AssemblyOptions::default();
        assert!(matches!(
            assemble_transport(&mesh, 0.0, &FlowField::constant(1.0), 0.0, &opts, 0.0),
            Err(AssemblyError::NonPositiveDiffusion(_))
        ));
        assert!(matches!(
            assemble_transport(&mesh, 1.0, &FlowField::constant(-1.0), 0.0, &opts, 0.0),
            Err(AssemblyError::NegativeFlow { .. })
        ));
        let lax = AssemblyOptions { strict_flow: false, ..opts };
        assert!(assemble_transport(&mesh, 1.0, &FlowField::constant(-1.0), 0.0, &lax, 0.0).is_ok());
        let sched = InletSchedule::constant(1.0);
        assert!(matches!(
            assemble_coupled(&mesh, 1.0, 1.0, &FlowField::constant(1.0), &sched, &[0.0; 3], 0.0, &opts),
            Err(AssemblyError::DimensionMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn schedule_norms() {
        let s = InletSchedule { times: vec![0.0, 1.0, 3.0], values: vec![0.0, 2.0, 2.0] };
        assert_eq!(s.eval(0.5), 1.0);
        assert_eq!(s.eval(10.0), 2.0);
        assert_eq!(s.sup(0.5), 1.0);
        assert_eq!(s.sup(5.0), 2.0);
        // ∫0^1 (2t)² dt + ∫1^3 4 dt = 4/3 + 8
        assert!((s.l2_norm(3.0) - (4.0f64 / 3.0 + 8.0).sqrt()).abs() < 1e-14);
        assert!(InletSchedule { times: vec![1.0, 1.0], values: vec![0.0, 0.0] }.validate().is_err());
    }

    #[test]
    fn flow_profiles() {
        let ramp = FlowField::TimeRamp { q0: 1.0, q1: 3.0, ramp_time: 10.0 };
        assert_eq!(ramp.eval(0.3, 5.0), 2.0);
        assert_eq!(ramp.eval(0.3, 50.0), 3.0);
        assert_eq!(ramp.sup(5.0), 2.0);
        let ax = FlowField::AxiallyVarying { z: vec![0.0, 1.0], t: vec![0.0, 2.0], values: vec![vec![1.0, 2.0], vec![-1.0, 4.0]] };
        assert_eq!(ax.eval(0.5, 1.0), 1.5);
        assert_eq!(ax.sup(2.0), 4.0);
        assert_eq!(ax.sup(1.0), 3.0);
        assert_eq!(ax.sup_negative_part(2.0), 1.0);
        assert_eq!(ax.sup_negative_part(1.0), 0.0);
        assert!(FlowField::AxiallyVarying { z: vec![0.0], t: vec![0.0], values: vec![] }.validate().is_err());
    }

    #[test]
    fn triplet_dump() {
        let m = CsrMatrix::from_triplets(2, &[(0, 0, 1.5), (1, 0, -2.0)]);
        let mut buf = Vec::new();
        write_triplets(&m, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("1 0 -2e0"));
    }
}
