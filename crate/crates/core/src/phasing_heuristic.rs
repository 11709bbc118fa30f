//! Analytic leg-cost estimate and the cost tensors built from it.
//!
//! The estimate is a Hohmann transfer, preceded by a coast on the departure
//! orbit when the phasing allows it inside the leg's time window. Otherwise the
//! chaser goes through a circular waiting orbit (inner or outer) whose radius
//! is picked so that two Hohmann transfers end at the target.

use std::f64::consts::{PI, TAU};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use roots::{find_root_brent, Convergency};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::leg_geometry::INFEASIBLE_PENALTY;
use crate::orbital_core::{wrap_two_pi, Body, Constants};

/// Residual tolerance of the waiting-radius root, rad.
pub const WAITING_RADIUS_TOL: f64 = 1e-10;

const CACHE_MAGIC: &[u8; 8] = b"MRRTENSR";
const CACHE_VERSION: u32 = 1;
const PHASE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhasingError {
    #[error("departure and arrival radii are equal; there is no relative drift")]
    EqualRadii,
    #[error("no {side:?} waiting orbit with k_rev = {k_rev} closes the rendezvous")]
    NoRoot { side: WaitingSide, k_rev: i32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhasingKind {
    DirectHohmann,
    WaitThenHohmann,
    DoubleHohmannViaWaitingOrbit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WaitingSide {
    Inner,
    Outer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasingSolution {
    pub kind: PhasingKind,
    /// Waiting-orbit radius; `None` for the single-Hohmann schemes.
    pub r3: Option<f64>,
    pub k_rev: i32,
    /// Coast before the (first) Hohmann transfer, or time spent on the
    /// waiting orbit.
    pub t_wait: f64,
    pub dv: f64,
}

/// Chaser, targets and mission horizon shared by every cost builder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionProblem {
    pub constants: Constants,
    pub chaser: Body,
    pub targets: Vec<Body>,
    /// T_M, s.
    pub t_mission: f64,
    /// Time-grid refinement D (grid points per target).
    pub d: usize,
}

impl MissionProblem {
    pub fn n(&self) -> usize {
        self.targets.len()
    }

    /// Body by tensor row index: 0 is the chaser, `i ≥ 1` is `targets[i-1]`.
    pub fn body(&self, i: usize) -> &Body {
        if i == 0 {
            &self.chaser
        } else {
            &self.targets[i - 1]
        }
    }

    /// Grid step ΔT = T_M / (N·D).
    pub fn dt_grid(&self) -> f64 {
        self.t_mission / (self.n() * self.d) as f64
    }

    /// Default duration cap M = ceil(1.5·D).
    pub fn default_m_cap(&self) -> usize {
        (1.5 * self.d as f64).ceil() as usize
    }

    /// SHA-256 over the chaser and target rows (id, radius, θ0 as little-endian bytes).
    pub fn table_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for b in std::iter::once(&self.chaser).chain(self.targets.iter()) {
            h.update(b.id.to_le_bytes());
            h.update(b.radius.to_le_bytes());
            h.update(b.theta0.to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Smallest nonnegative coast after which the arrival body leads the
/// departure body by γ* = π − ω2·T_H, so that a Hohmann transfer started
/// then meets it. `theta1`, `theta2` are the current phases.
pub fn wait_time(constants: &Constants, theta1: f64, theta2: f64, r1: f64, r2: f64) -> Result<f64, PhasingError> {
    if r1 == r2 {
        return Err(PhasingError::EqualRadii);
    }
    let w1 = constants.angular_rate(r1);
    let w2 = constants.angular_rate(r2);
    let t_h = constants.hohmann(r1, r2).duration;
    // relative phase θ2 − θ1 drifts at ω2 − ω1; wait until it equals γ*
    let gap = theta2 - theta1 - (PI - w2 * t_h);
    let drift = w1 - w2;
    let angle = wrap_two_pi(if drift > 0.0 { gap } else { -gap });
    Ok(angle / drift.abs())
}

struct Tol;

impl Convergency<f64> for Tol {
    fn is_root_found(&mut self, y: f64) -> bool {
        y.abs() < WAITING_RADIUS_TOL
    }
    fn is_converged(&mut self, x1: f64, x2: f64) -> bool {
        (x1 - x2).abs() <= 4.0 * f64::EPSILON * x1.abs().max(x2.abs())
    }
    fn is_iteration_limit_reached(&mut self, iter: usize) -> bool {
        iter > 200
    }
}

fn coast_time(constants: &Constants, t_max: f64, r1: f64, r2: f64, r3: f64) -> f64 {
    t_max - constants.hohmann(r1, r3).duration - constants.hohmann(r3, r2).duration
}

/// Residual of the rendezvous condition for waiting radius `r3`; increasing in `r3`.
pub fn rendezvous_residual(constants: &Constants, dtheta0: f64, t_max: f64, r1: f64, r2: f64, r3: f64, k_rev: i32) -> f64 {
    let t_c = coast_time(constants, t_max, r1, r2, r3);
    dtheta0 - (t_c * constants.angular_rate(r3) - t_max * constants.angular_rate(r2) + 2.0 * (1 - k_rev) as f64 * PI)
}

/// Search interval for the waiting radius on `side`.
pub fn waiting_bracket(side: WaitingSide, r1: f64, r2: f64) -> (f64, f64) {
    match side {
        WaitingSide::Inner => (0.5 * r1.min(r2), r1.min(r2)),
        WaitingSide::Outer => (r1.max(r2), 2.0 * r1.max(r2)),
    }
}

/// Radius of the circular waiting orbit that closes the rendezvous in exactly
/// `t_max` with `k_rev` extra revolutions relative to the target.
pub fn solve_waiting_radius(
    constants: &Constants,
    dtheta0: f64,
    t_max: f64,
    r1: f64,
    r2: f64,
    k_rev: i32,
    side: WaitingSide,
) -> Result<f64, PhasingError> {
    let no_root = PhasingError::NoRoot { side, k_rev };
    let (lo, mut hi) = waiting_bracket(side, r1, r2);
    // the coast on the waiting orbit shrinks as r3 grows; clip where it vanishes
    let coast = |r3: f64| coast_time(constants, t_max, r1, r2, r3);
    if coast(lo) < 0.0 {
        return Err(no_root);
    }
    if coast(hi) < 0.0 {
        hi = find_root_brent(lo, hi, coast, &mut Tol).map_err(|_| no_root.clone())?;
        if coast(hi) < 0.0 {
            hi = hi.next_down();
        }
        if hi < lo {
            return Err(no_root);
        }
    }
    let f = |r3: f64| rendezvous_residual(constants, dtheta0, t_max, r1, r2, r3, k_rev);
    let (f_lo, f_hi) = (f(lo), f(hi));
    if f_lo.abs() < WAITING_RADIUS_TOL {
        return Ok(lo);
    }
    if f_hi.abs() < WAITING_RADIUS_TOL {
        return Ok(hi);
    }
    if f_lo > 0.0 || f_hi < 0.0 {
        return Err(no_root);
    }
    let r3 = find_root_brent(lo, hi, f, &mut Tol).map_err(|_| no_root.clone())?;
    if f(r3).abs() >= WAITING_RADIUS_TOL {
        return Err(no_root);
    }
    Ok(r3)
}

fn waiting_orbit_candidates(constants: &Constants, dtheta0: f64, t_max: f64, r1: f64, r2: f64) -> Option<PhasingSolution> {
    const CASES: [(WaitingSide, i32); 4] = [
        (WaitingSide::Inner, 0),
        (WaitingSide::Inner, 1),
        (WaitingSide::Outer, 0),
        (WaitingSide::Outer, -1),
    ];
    CASES
        .iter()
        .filter_map(|&(side, k)| {
            let r3 = solve_waiting_radius(constants, dtheta0, t_max, r1, r2, k, side).ok()?;
            let dv = constants.hohmann(r1, r3).dv + constants.hohmann(r3, r2).dv;
            Some(PhasingSolution {
                kind: PhasingKind::DoubleHohmannViaWaitingOrbit,
                r3: Some(r3),
                k_rev: k,
                t_wait: coast_time(constants, t_max, r1, r2, r3),
                dv,
            })
        })
        .min_by(|a, b| a.dv.total_cmp(&b.dv))
}

/// Estimated cost of leaving `dep` at `t_dep` and meeting `arr` at `t_arr`.
/// Returns [`INFEASIBLE_PENALTY`] and no solution when no scheme fits.
pub fn leg_cost_estimate(constants: &Constants, dep: &Body, arr: &Body, t_dep: f64, t_arr: f64) -> (f64, Option<PhasingSolution>) {
    let t_max = t_arr - t_dep;
    if !(t_max > 0.0) {
        return (INFEASIBLE_PENALTY, None);
    }
    let (r1, r2) = (dep.radius, arr.radius);
    let theta1 = constants.phase(dep, t_dep);
    let theta2 = constants.phase(arr, t_dep);
    let dtheta0 = wrap_two_pi(theta2 - theta1);

    if r1 == r2 {
        if dtheta0 < PHASE_EPS || TAU - dtheta0 < PHASE_EPS {
            let sol = PhasingSolution {
                kind: PhasingKind::DirectHohmann,
                r3: None,
                k_rev: 0,
                t_wait: 0.0,
                dv: 0.0,
            };
            return (0.0, Some(sol));
        }
    } else {
        let h = constants.hohmann(r1, r2);
        let t_wait = wait_time(constants, theta1, theta2, r1, r2).expect("radii differ");
        if t_wait + h.duration <= t_max {
            let kind = if t_wait == 0.0 {
                PhasingKind::DirectHohmann
            } else {
                PhasingKind::WaitThenHohmann
            };
            let sol = PhasingSolution {
                kind,
                r3: None,
                k_rev: 0,
                t_wait,
                dv: h.dv,
            };
            return (h.dv, Some(sol));
        }
    }
    match waiting_orbit_candidates(constants, dtheta0, t_max, r1, r2) {
        Some(sol) => (sol.dv, Some(sol)),
        None => (INFEASIBLE_PENALTY, None),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorKind {
    Matrix2D,
    Tensor3D,
    Tensor4D,
}

impl TensorKind {
    fn code(self) -> u8 {
        match self {
            TensorKind::Matrix2D => 2,
            TensorKind::Tensor3D => 3,
            TensorKind::Tensor4D => 4,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            2 => Some(TensorKind::Matrix2D),
            3 => Some(TensorKind::Tensor3D),
            4 => Some(TensorKind::Tensor4D),
            _ => None,
        }
    }
}

/// Dense row-major leg costs, km/s.
///
/// Axes: Matrix2D `[dep, arr]`, Tensor3D `[dep, arr, slot]`, Tensor4D
/// `[dep, arr, h, m-1]`. `dep` counts the chaser as 0; `arr` is the target
/// index 0..N (target id − 1). Invalid entries hold [`INFEASIBLE_PENALTY`].
#[derive(Debug, Clone, PartialEq)]
pub struct CostTensor {
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Duration cap M in grid units (Tensor4D only, else 0).
    pub m_cap: usize,
    /// Grid step, s (Tensor4D), slot length (Tensor3D), 0 for Matrix2D.
    pub dt_grid: f64,
}

impl CostTensor {
    pub fn at2(&self, dep: usize, arr: usize) -> f64 {
        self.values[dep * self.shape[1] + arr]
    }

    pub fn at3(&self, dep: usize, arr: usize, slot: usize) -> f64 {
        self.values[(dep * self.shape[1] + arr) * self.shape[2] + slot]
    }

    /// Cost for departing at grid index `h` with duration `m ≥ 1` grid units;
    /// durations above the cap reuse the entry at the cap.
    pub fn at4(&self, dep: usize, arr: usize, h: usize, m: usize) -> f64 {
        debug_assert!(m >= 1);
        let m = m.min(self.m_cap);
        self.values[((dep * self.shape[1] + arr) * self.shape[2] + h) * self.shape[3] + m - 1]
    }
}

fn self_transfer(dep: usize, arr: usize) -> bool {
    dep == arr + 1
}

/// Time-free Hohmann costs, `(N+1) × N`.
pub fn build_cost_matrix(problem: &MissionProblem) -> CostTensor {
    let n = problem.n();
    let values = (0..(n + 1) * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            if self_transfer(i, j) {
                INFEASIBLE_PENALTY
            } else {
                problem.constants.hohmann(problem.body(i).radius, problem.targets[j].radius).dv
            }
        })
        .collect();
    CostTensor {
        kind: TensorKind::Matrix2D,
        shape: vec![n + 1, n],
        values,
        m_cap: 0,
        dt_grid: 0.0,
    }
}

/// Uniform-slot costs, `(N+1) × N × N`; slot k runs from k·T_M/N to (k+1)·T_M/N.
pub fn build_cost_tensor3(problem: &MissionProblem) -> CostTensor {
    let n = problem.n();
    let slot = problem.t_mission / n as f64;
    let values = (0..(n + 1) * n * n)
        .into_par_iter()
        .map(|idx| {
            let k = idx % n;
            let j = (idx / n) % n;
            let i = idx / (n * n);
            if self_transfer(i, j) {
                return INFEASIBLE_PENALTY;
            }
            let t0 = k as f64 * slot;
            leg_cost_estimate(&problem.constants, problem.body(i), &problem.targets[j], t0, t0 + slot).0
        })
        .collect();
    CostTensor {
        kind: TensorKind::Tensor3D,
        shape: vec![n + 1, n, n],
        values,
        m_cap: 0,
        dt_grid: slot,
    }
}

/// Grid costs, `(N+1) × N × (N·D) × M`; entry `(i, j, h, m-1)` departs at
/// h·ΔT and arrives at (h+m)·ΔT.
pub fn build_cost_tensor4(problem: &MissionProblem, m_cap: usize) -> CostTensor {
    let n = problem.n();
    let hs = n * problem.d;
    let m_cap = m_cap.max(1);
    let dt = problem.dt_grid();
    let values = (0..(n + 1) * n * hs * m_cap)
        .into_par_iter()
        .map(|idx| {
            let m = idx % m_cap + 1;
            let h = (idx / m_cap) % hs;
            let j = (idx / (m_cap * hs)) % n;
            let i = idx / (m_cap * hs * n);
            if self_transfer(i, j) {
                return INFEASIBLE_PENALTY;
            }
            let t0 = h as f64 * dt;
            let t1 = (h + m) as f64 * dt;
            leg_cost_estimate(&problem.constants, problem.body(i), &problem.targets[j], t0, t1).0
        })
        .collect();
    CostTensor {
        kind: TensorKind::Tensor4D,
        shape: vec![n + 1, n, hs, m_cap],
        values,
        m_cap,
        dt_grid: dt,
    }
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a cost-tensor cache file")]
    BadMagic,
    #[error("unsupported cache version {0}")]
    BadVersion(u32),
    #[error("cache does not match the problem: {0}")]
    Mismatch(&'static str),
}

/// Writes `tensor` with a header identifying `problem`. Layout (little endian):
/// magic `MRRTENSR`, u32 version, u8 kind, u32 N, u32 D, u32 M, f64 T_M,
/// f64 μ, f64 grid step, 32-byte table hash, u64 count, then `count` f64 values.
pub fn save_tensor(path: &Path, tensor: &CostTensor, problem: &MissionProblem) -> Result<(), CacheError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&[tensor.kind.code()])?;
    w.write_all(&(problem.n() as u32).to_le_bytes())?;
    w.write_all(&(problem.d as u32).to_le_bytes())?;
    w.write_all(&(tensor.m_cap as u32).to_le_bytes())?;
    w.write_all(&problem.t_mission.to_le_bytes())?;
    w.write_all(&problem.constants.mu().to_le_bytes())?;
    w.write_all(&tensor.dt_grid.to_le_bytes())?;
    w.write_all(&problem.table_hash())?;
    w.write_all(&(tensor.values.len() as u64).to_le_bytes())?;
    for v in &tensor.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_array<const K: usize>(r: &mut impl Read) -> Result<[u8; K], CacheError> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Loads a tensor written by [`save_tensor`], rejecting it unless its header
/// matches `problem` and the expected kind.
pub fn load_tensor(path: &Path, problem: &MissionProblem, kind: TensorKind) -> Result<CostTensor, CacheError> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_array::<8>(&mut r)? != CACHE_MAGIC {
        return Err(CacheError::BadMagic);
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CACHE_VERSION {
        return Err(CacheError::BadVersion(version));
    }
    let [code] = read_array::<1>(&mut r)?;
    if TensorKind::from_code(code) != Some(kind) {
        return Err(CacheError::Mismatch("tensor kind"));
    }
    let n = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let d = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let m_cap = u32::from_le_bytes(read_array(&mut r)?) as usize;
    let t_mission = f64::from_le_bytes(read_array(&mut r)?);
    let mu = f64::from_le_bytes(read_array(&mut r)?);
    let dt_grid = f64::from_le_bytes(read_array(&mut r)?);
    let hash = read_array::<32>(&mut r)?;
    if n != problem.n() {
        return Err(CacheError::Mismatch("N"));
    }
    if hash != problem.table_hash() {
        return Err(CacheError::Mismatch("target table hash"));
    }
    if mu != problem.constants.mu() {
        return Err(CacheError::Mismatch("gravitational parameter"));
    }
    if kind != TensorKind::Matrix2D && t_mission != problem.t_mission {
        return Err(CacheError::Mismatch("mission duration"));
    }
    if kind == TensorKind::Tensor4D && d != problem.d {
        return Err(CacheError::Mismatch("grid refinement D"));
    }
    let shape = match kind {
        TensorKind::Matrix2D => vec![n + 1, n],
        TensorKind::Tensor3D => vec![n + 1, n, n],
        TensorKind::Tensor4D => vec![n + 1, n, n * d, m_cap],
    };
    let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
    if count != shape.iter().product::<usize>() {
        return Err(CacheError::Mismatch("value count"));
    }
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(f64::from_le_bytes(read_array(&mut r)?));
    }
    Ok(CostTensor {
        kind,
        shape,
        values,
        m_cap,
        dt_grid,
    })
}
