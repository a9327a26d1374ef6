//! CSV writers and readers for fields and trajectories.
//!
//! Numbers are written in Rust's shortest round-trip scientific notation, so
//! reading a file back reproduces every `f64` bit for bit.

use std::io::Write;

use crate::geometry::Mesh;
use crate::timestepping::{State, StepInfo, Trajectory};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrajectoryReadError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("trajectory file holds no states")]
    Empty,
    #[error("trajectory has {found} cells per state, mesh has {expected}")]
    CellCount { expected: usize, found: usize },
}

/// Writes `cell,z,r,S,B` rows for one state.
pub fn write_fields<W: Write>(mesh: &Mesh, state: &State, mut out: W) -> std::io::Result<()> {
    writeln!(out, "cell,z,r,S,B")?;
    for (i, c) in mesh.cells.iter().enumerate() {
        writeln!(out, "{i},{:e},{:e},{:e},{:e}", c.center[1], c.center[0], state.s[i], state.b[i])?;
    }
    Ok(())
}

/// File name of the snapshot at time `t`.
pub fn fields_file_name(t: f64) -> String {
    format!("fields_{t}.csv")
}

/// Indices of the stored states written as snapshots: `count` evenly spaced
/// interior times plus the first and last state.
pub fn snapshot_indices(n_steps: usize, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..=count + 1).map(|k| ((k * n_steps) as f64 / (count + 1) as f64).round() as usize).collect();
    idx.dedup();
    idx
}

/// Writes every state as `step,t,cell,S,B,picard_iterations,linear_residual`
/// rows; the last two columns describe the step that produced the state.
pub fn write_trajectory<W: Write>(traj: &Trajectory, mut out: W) -> std::io::Result<()> {
    writeln!(out, "# dt = {:e}", traj.dt)?;
    writeln!(out, "step,t,cell,S,B,picard_iterations,linear_residual")?;
    for (n, st) in traj.states.iter().enumerate() {
        let info = n.checked_sub(1).and_then(|k| traj.steps.get(k));
        let (it, res) = info.map_or((0, 0.0), |i| (i.picard_iterations, i.linear_residual));
        for (i, (s, b)) in st.s.iter().zip(&st.b).enumerate() {
            writeln!(out, "{n},{:e},{i},{s:e},{b:e},{it},{res:e}", st.t)?;
        }
    }
    Ok(())
}

/// Parses the output of [`write_trajectory`].
pub fn read_trajectory(text: &str, n_cells: usize) -> Result<Trajectory, TrajectoryReadError> {
    let mut dt = 0.0;
    let mut states: Vec<State> = Vec::new();
    let mut steps: Vec<StepInfo> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let bad = |message: String| TrajectoryReadError::Malformed { line, message };
        let raw = raw.trim();
        if let Some(v) = raw.strip_prefix("# dt =") {
            dt = v.trim().parse().map_err(|e| bad(format!("dt: {e}")))?;
            continue;
        }
        if raw.is_empty() || raw.starts_with('#') || raw.starts_with("step,") {
            continue;
        }
        let cols: Vec<&str> = raw.split(',').collect();
        if cols.len() != 7 {
            return Err(bad(format!("expected 7 columns, found {}", cols.len())));
        }
        let int = |i: usize| cols[i].parse::<usize>().map_err(|e| bad(format!("column {}: {e}", i + 1)));
        let num = |i: usize| cols[i].parse::<f64>().map_err(|e| bad(format!("column {}: {e}", i + 1)));
        let (n, t, cell, s, b, it, res) = (int(0)?, num(1)?, int(2)?, num(3)?, num(4)?, int(5)?, num(6)?);
        if n == states.len() && cell == 0 {
            states.push(State { t, s: Vec::with_capacity(n_cells), b: Vec::with_capacity(n_cells) });
            if n > 0 {
                steps.push(StepInfo { t, picard_iterations: it, linear_residual: res, ..Default::default() });
            }
        }
        if n + 1 != states.len() {
            return Err(bad(format!("step {n} out of order")));
        }
        let st = states.last_mut().expect("a state was pushed above");
        if cell != st.s.len() {
            return Err(bad(format!("cell {cell} out of order")));
        }
        st.s.push(s);
        st.b.push(b);
    }
    if states.is_empty() {
        return Err(TrajectoryReadError::Empty);
    }
    if let Some(st) = states.iter().find(|st| st.s.len() != n_cells) {
        return Err(TrajectoryReadError::CellCount { expected: n_cells, found: st.s.len() });
    }
    Ok(Trajectory { dt, states, steps, outer_history: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_mesh, MeshSpec};

    fn sample() -> Trajectory {
        let state = |t: f64| State { t, s: vec![0.1 * t, 1.0 / 3.0, 2e-300], b: vec![std::f64::consts::PI, 0.0, t] };
        let info = |t: f64| StepInfo { t, picard_iterations: 4, linear_residual: 1.5e-13, ..Default::default() };
        Trajectory { dt: 0.5, states: vec![state(0.0), state(0.5), state(1.0)], steps: vec![info(0.5), info(1.0)], outer_history: Vec::new() }
    }

    #[test]
    fn trajectory_round_trips_exactly() {
        let traj = sample();
        let mut buf = Vec::new();
        write_trajectory(&traj, &mut buf).unwrap();
        let back = read_trajectory(std::str::from_utf8(&buf).unwrap(), 3).unwrap();
        assert_eq!(back.dt, traj.dt);
        assert_eq!(back.states, traj.states);
        assert_eq!(back.steps[1].picard_iterations, 4);
        assert_eq!(back.steps[1].linear_residual, 1.5e-13);
    }

    #[test]
    fn reader_rejects_bad_input() {
        assert_eq!(read_trajectory("", 3), Err(TrajectoryReadError::Empty));
        assert!(matches!(read_trajectory("0,0,0,1,2\n", 1), Err(TrajectoryReadError::Malformed { line: 1, .. })));
        assert!(matches!(read_trajectory("0,0,0,x,2,0,0\n", 1), Err(TrajectoryReadError::Malformed { .. })));
        let mut buf = Vec::new();
        write_trajectory(&sample(), &mut buf).unwrap();
        assert_eq!(read_trajectory(std::str::from_utf8(&buf).unwrap(), 4), Err(TrajectoryReadError::CellCount { expected: 4, found: 3 }));
    }

    #[test]
    fn fields_have_one_row_per_cell() {
        let mesh = build_mesh(&MeshSpec::axial(1.0, 0.5, 4)).unwrap();
        let state = State { t: 0.0, s: vec![1.0; 4], b: vec![0.5; 4] };
        let mut buf = Vec::new();
        write_fields(&mesh, &state, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(1).unwrap().starts_with("0,1.25e-1,0e0,"));
    }

    #[test]
    fn snapshots_cover_both_ends() {
        assert_eq!(snapshot_indices(100, 10), vec![0, 9, 18, 27, 36, 45, 55, 64, 73, 82, 91, 100]);
        assert_eq!(snapshot_indices(3, 10), vec![0, 1, 2, 3]);
        assert_eq!(snapshot_indices(0, 10), vec![0]);
        assert_eq!(fields_file_name(200.0), "fields_200.csv");
    }
}
