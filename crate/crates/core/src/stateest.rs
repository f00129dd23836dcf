//! Recovering the initial state of a discrete-time linear system
//! `z(t+1) = 𝒜·z(t)` whose scalar outputs `yⁱ(t) = cⁱ·z(t)` are spread over
//! `m` agents.
//!
//! Agent `i` holds its local observability matrix `Oⁱ = [cⁱ; cⁱ𝒜; …;
//! cⁱ𝒜^{d−1}]` and the matching `d` measurements, so `Oⁱ·z(0) = yⁱ`. The
//! stacked system is a least-squares problem the simulator can solve, and
//! its solution is unique exactly when the agents are jointly observable.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::datasets::{partition, Dataset, Partition};
use crate::error::{Error, Result};
use crate::linalg::{gram, matvec, matvec_t, sym_eigen, sym_eigenvalues, Matrix};
use crate::optimizers::IpsgParams;
use crate::simnet::{run_until_stop, RunConfig, RunResult};

/// Relative singular-value cut-off for numerical rank.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct LtiSystem {
    pub a_state: Matrix,
    pub c_rows: Vec<Vec<f64>>,
}

impl LtiSystem {
    pub fn new(a_state: Matrix, c_rows: Vec<Vec<f64>>) -> Result<Self> {
        if !a_state.is_square() || a_state.rows() == 0 {
            return Err(Error::invalid(format!(
                "state matrix must be square and non-empty, got {}x{}",
                a_state.rows(),
                a_state.cols()
            )));
        }
        if c_rows.is_empty() {
            return Err(Error::invalid("system needs at least one agent"));
        }
        let d = a_state.rows();
        if let Some(i) = c_rows.iter().position(|c| c.len() != d) {
            return Err(Error::invalid(format!(
                "output row of agent {} has length {}, expected {d}",
                i + 1,
                c_rows[i].len()
            )));
        }
        if c_rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("output rows must be finite"));
        }
        Ok(LtiSystem { a_state, c_rows })
    }

    pub fn dim(&self) -> usize {
        self.a_state.rows()
    }

    pub fn agents(&self) -> usize {
        self.c_rows.len()
    }
}

/// `𝒜ᵗ·z0` by repeated multiplication.
pub fn propagate(a_state: &Matrix, z0: &[f64], t: u64) -> Result<Vec<f64>> {
    let mut z = z0.to_vec();
    for _ in 0..t {
        z = matvec(a_state, &z)?;
    }
    Ok(z)
}

/// Rows `c, c𝒜, …, c𝒜^{d−1}`.
pub fn local_observability(a_state: &Matrix, c: &[f64]) -> Result<Matrix> {
    let d = a_state.rows();
    if !a_state.is_square() || c.len() != d {
        return Err(Error::invalid("observability needs a square state matrix and a matching output row"));
    }
    let mut rows = Vec::with_capacity(d);
    let mut r = c.to_vec();
    for t in 0..d {
        if t > 0 {
            // row vector times 𝒜
            r = crate::linalg::matvec_t(a_state, &r)?;
        }
        rows.push(r.clone());
    }
    Matrix::from_rows(&rows)
}

/// Rank as the number of singular values above `RANK_TOL` times the
/// largest one.
pub fn numerical_rank(m: &Matrix) -> Result<usize> {
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(0);
    }
    let sv: Vec<f64> = sym_eigenvalues(&gram(m))?
        .into_iter()
        .map(|v| v.max(0.0).sqrt())
        .collect();
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > RANK_TOL * top).count())
}

#[derive(Clone, Debug, Serialize)]
pub struct ObservabilityMatrices {
    pub o_local: Vec<Matrix>,
    /// Local matrices stacked in agent order.
    pub o_stacked: Matrix,
    /// Rows grouped by time step: `c¹𝒜ᵗ, …, cᵐ𝒜ᵗ` for `t = 0, …, d−1`.
    pub o_bar: Matrix,
    /// `o_stacked` row `r` equals `o_bar` row `row_map[r]`.
    pub row_map: Vec<usize>,
    pub rank_local: Vec<usize>,
    pub rank_global: usize,
    pub jointly_observable: bool,
}

pub fn check_joint_observability(sys: &LtiSystem) -> Result<ObservabilityMatrices> {
    let d = sys.dim();
    let m = sys.agents();
    let o_local = sys
        .c_rows
        .iter()
        .map(|c| local_observability(&sys.a_state, c))
        .collect::<Result<Vec<_>>>()?;
    let o_stacked = Matrix::vstack(&o_local)?;

    // Ō is built on its own, by advancing every agent's row one step at a time
    let mut o_bar = Matrix::zeros(m * d, d);
    let mut current = sys.c_rows.clone();
    for t in 0..d {
        for (i, row) in current.iter_mut().enumerate() {
            if t > 0 {
                *row = crate::linalg::matvec_t(&sys.a_state, row)?;
            }
            o_bar.row_mut(t * m + i).copy_from_slice(row);
        }
    }
    let row_map: Vec<usize> = (0..m * d).map(|r| (r % d) * m + r / d).collect();
    for (r, &target) in row_map.iter().enumerate() {
        if o_stacked.row(r) != o_bar.row(target) {
            return Err(Error::Verification(format!(
                "stacked observability row {r} differs from its rearranged counterpart {target}"
            )));
        }
    }

    let rank_local = o_local.iter().map(numerical_rank).collect::<Result<Vec<_>>>()?;
    let rank_global = numerical_rank(&o_stacked)?;
    Ok(ObservabilityMatrices {
        o_local,
        o_stacked,
        o_bar,
        row_map,
        rank_local,
        rank_global,
        jointly_observable: rank_global == d,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeasurementSet {
    /// `yⁱ = [cⁱz(0), cⁱz(1), …, cⁱz(d−1)]` per agent.
    pub y_local: Vec<Vec<f64>>,
}

/// Noiseless outputs over the first `d` sampling instants.
pub fn simulate_measurements(sys: &LtiSystem, z0: &[f64]) -> Result<MeasurementSet> {
    let d = sys.dim();
    if z0.len() != d {
        return Err(Error::invalid(format!("initial state has length {}, expected {d}", z0.len())));
    }
    let mut y_local = vec![Vec::with_capacity(d); sys.agents()];
    let mut z = z0.to_vec();
    for t in 0..d {
        if t > 0 {
            z = matvec(&sys.a_state, &z)?;
        }
        for (y, c) in y_local.iter_mut().zip(&sys.c_rows) {
            y.push(crate::linalg::dot(c, &z));
        }
    }
    Ok(MeasurementSet { y_local })
}

/// Agent `i` gets the block `(Oⁱ, yⁱ)`.
pub fn to_regression(sys: &LtiSystem, meas: &MeasurementSet) -> Result<(Dataset, Partition)> {
    if meas.y_local.len() != sys.agents() || meas.y_local.iter().any(|y| y.len() != sys.dim()) {
        return Err(Error::invalid("measurement set does not match the system shape"));
    }
    let obs = check_joint_observability(sys)?;
    let b: Vec<f64> = meas.y_local.iter().flatten().copied().collect();
    let mut provenance = format!(
        "state estimation: {} agents, {} states, global observability rank {}",
        sys.agents(),
        sys.dim(),
        obs.rank_global
    );
    let mut ds = Dataset::new("lti", obs.o_stacked, b)?;
    if !obs.jointly_observable {
        provenance.push_str("; WARNING: not jointly observable, the initial state is not unique; errors are measured against the least-norm solution");
        let x = least_norm_solution(&ds.a, &ds.b)?;
        ds = match ds.clone().with_consistent_minimizer(x.clone()) {
            Ok(c) => c,
            Err(_) => {
                ds.x_star = Some(x);
                ds
            }
        };
    }
    let ds = ds.with_provenance(provenance);
    let part = partition(&ds, sys.agents())?;
    Ok((ds, part))
}

/// Minimum-norm least-squares solution through the pseudo-inverse of
/// `AᵀA`, dropping eigenvalues below `RANK_TOL²` of the largest.
pub fn least_norm_solution(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let eig = sym_eigen(&gram(a))?;
    let q = eig.vectors.expect("vectors requested");
    let rhs = matvec_t(a, b)?;
    let top = eig.values.last().copied().unwrap_or(0.0).max(0.0);
    let mut x = vec![0.0; a.cols()];
    for (k, &lam) in eig.values.iter().enumerate() {
        if top == 0.0 || lam <= RANK_TOL * RANK_TOL * top {
            continue;
        }
        let col: Vec<f64> = (0..a.cols()).map(|i| q[(i, k)]).collect();
        let c = crate::linalg::dot(&col, &rhs) / lam;
        crate::linalg::axpy(c, &col, &mut x);
    }
    Ok(x)
}

/// Solves the regression with the simulator and returns `ẑ(0)` with the
/// run's trace.
pub fn estimate_initial_state(sys: &LtiSystem, meas: &MeasurementSet, cfg: &RunConfig) -> Result<(Vec<f64>, RunResult)> {
    let (ds, part) = to_regression(sys, meas)?;
    let res = run_until_stop(cfg, &ds, &part)?;
    Ok((res.final_x.clone(), res))
}

/// Four states in two rotating pairs; each agent sees one coordinate, so it
/// can recover only its own pair, but the four together observe everything.
pub fn demo_observable() -> LtiSystem {
    let rot = |theta: f64, r: f64| [[r * theta.cos(), -r * theta.sin()], [r * theta.sin(), r * theta.cos()]];
    let p = rot(0.7, 0.98);
    let q = rot(1.9, 0.95);
    let a = Matrix::from_rows(&[
        vec![p[0][0], p[0][1], 0.0, 0.0],
        vec![p[1][0], p[1][1], 0.0, 0.0],
        vec![0.0, 0.0, q[0][0], q[0][1]],
        vec![0.0, 0.0, q[1][0], q[1][1]],
    ])
    .expect("static shape");
    let c_rows = (0..4)
        .map(|k| {
            let mut c = vec![0.0; 4];
            c[k] = 1.0;
            c
        })
        .collect();
    LtiSystem::new(a, c_rows).expect("static shape")
}

/// Static states all read through the first coordinate.
pub fn demo_unobservable() -> LtiSystem {
    LtiSystem::new(Matrix::identity(3), vec![vec![1.0, 0.0, 0.0]; 3]).expect("static shape")
}

/// IPSG parameters for the demo, with `α` at about half of `ᾱ`.
pub fn demo_params() -> IpsgParams {
    IpsgParams { alpha: 0.45, delta: 0.2, beta: 0.1 }
}

pub const DEMO_Z0: [f64; 4] = [1.0, -2.0, 0.5, 3.0];

/// Reads a system file: `key = value` lines with `#` comments. Keys are
/// `d`, `m`, `A` (row-major, `d·d` numbers), `c1` … `cm` (`d` numbers each)
/// and an optional `z0`. Numbers are separated by spaces or commas.
pub fn parse_system(text: &str, origin: &Path) -> Result<(LtiSystem, Option<Vec<f64>>)> {
    let fmt_err = |line: usize, msg: String| Error::Format { path: origin.to_path_buf(), line, msg };
    let mut d = None;
    let mut m = None;
    let mut a = None;
    let mut z0 = None;
    let mut cs: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(line_no, format!("expected 'key = value', got '{line}'")))?;
        let key = key.trim();
        let nums = || {
            value
                .split(|ch: char| ch == ',' || ch.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| fmt_err(line_no, format!("bad number '{s}'"))))
                .collect::<Result<Vec<f64>>>()
        };
        let count = || {
            value
                .trim()
                .parse::<usize>()
                .map_err(|_| fmt_err(line_no, format!("'{key}' needs a positive integer")))
        };
        match key {
            "d" => d = Some((count()?, line_no)),
            "m" => m = Some((count()?, line_no)),
            "A" => a = Some((nums()?, line_no)),
            "z0" => z0 = Some((nums()?, line_no)),
            k if k.starts_with('c') && k[1..].parse::<usize>().is_ok() => {
                let i: usize = k[1..].parse().expect("checked");
                cs.push((i, line_no, nums()?));
            }
            other => return Err(fmt_err(line_no, format!("unknown key '{other}'"))),
        }
    }
    let (d, _) = d.ok_or_else(|| fmt_err(0, "missing 'd'".into()))?;
    let (m, m_line) = m.ok_or_else(|| fmt_err(0, "missing 'm'".into()))?;
    let (a, a_line) = a.ok_or_else(|| fmt_err(0, "missing 'A'".into()))?;
    if d == 0 || m == 0 {
        return Err(fmt_err(m_line, "d and m must be positive".into()));
    }
    if a.len() != d * d {
        return Err(fmt_err(a_line, format!("'A' has {} numbers, expected {}", a.len(), d * d)));
    }
    let mut c_rows = vec![None; m];
    for (i, line_no, row) in cs {
        if i == 0 || i > m {
            return Err(fmt_err(line_no, format!("agent index {i} outside 1..={m}")));
        }
        if row.len() != d {
            return Err(fmt_err(line_no, format!("'c{i}' has {} numbers, expected {d}", row.len())));
        }
        if c_rows[i - 1].replace(row).is_some() {
            return Err(fmt_err(line_no, format!("'c{i}' given twice")));
        }
    }
    let c_rows = c_rows
        .into_iter()
        .enumerate()
        .map(|(i, c)| c.ok_or_else(|| fmt_err(0, format!("missing 'c{}'", i + 1))))
        .collect::<Result<Vec<_>>>()?;
    let z0 = match z0 {
        Some((v, line_no)) if v.len() != d => {
            return Err(fmt_err(line_no, format!("'z0' has {} numbers, expected {d}", v.len())))
        }
        Some((v, _)) => Some(v),
        None => None,
    };
    let sys = LtiSystem::new(Matrix::from_row_major(d, d, a)?, c_rows)?;
    Ok((sys, z0))
}

pub fn load_system(path: &Path) -> Result<(LtiSystem, Option<Vec<f64>>)> {
    parse_system(&fs::read_to_string(path)?, path)
}

/// Renders a system in the file format read by [`parse_system`].
pub fn format_system(sys: &LtiSystem, z0: Option<&[f64]>) -> String {
    let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(" ");
    let mut s = format!("d = {}\nm = {}\nA = {}\n", sys.dim(), sys.agents(), join(sys.a_state.as_slice()));
    for (i, c) in sys.c_rows.iter().enumerate() {
        s.push_str(&format!("c{} = {}\n", i + 1, join(c)));
    }
    if let Some(z) = z0 {
        s.push_str(&format!("z0 = {}\n", join(z)));
    }
    s
}
