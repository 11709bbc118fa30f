//! Whole-mission plans, their evaluation and the resulting trajectory.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lambert::LambertSolver;
use crate::leg_geometry::{evaluate_leg, leg_cost, LegError, LegEvaluation, LegParameters, INFEASIBLE_PENALTY};
use crate::orbital_core::{Constants, OrbitError, StateVector, Vec2};
use crate::phasing_heuristic::MissionProblem;

pub const DEFAULT_TRACE_POINTS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MissionError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("leg {leg} cannot be flown: {source}")]
    InfeasibleLeg { leg: usize, source: LegError },
    #[error(transparent)]
    Orbit(#[from] OrbitError),
}

/// Encounter order, encounter epochs and the six shape parameters of every leg.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionPlan {
    /// Target ids in visiting order.
    pub sequence: Vec<u32>,
    /// Encounter epochs t_1..t_N, s.
    pub epochs: Vec<f64>,
    pub legs: Vec<LegParameters>,
}

impl MissionPlan {
    pub fn validate(&self, problem: &MissionProblem) -> Result<(), MissionError> {
        let n = self.sequence.len();
        if self.epochs.len() != n || self.legs.len() != n {
            return Err(MissionError::InvalidPlan(format!(
                "{} targets, {} epochs, {} legs",
                n,
                self.epochs.len(),
                self.legs.len()
            )));
        }
        let mut seen = vec![false; problem.n() + 1];
        for &id in &self.sequence {
            let i = id as usize;
            if i == 0 || i > problem.n() || seen[i] {
                return Err(MissionError::InvalidPlan(format!("target {id} is unknown or repeated")));
            }
            seen[i] = true;
        }
        let mut prev = 0.0;
        for &t in &self.epochs {
            if !(t > prev) {
                return Err(MissionError::InvalidPlan("epochs must increase strictly".into()));
            }
            prev = t;
        }
        if prev > problem.t_mission * (1.0 + 1e-12) {
            return Err(MissionError::InvalidPlan("last encounter after the mission horizon".into()));
        }
        Ok(())
    }

    /// Departure body index (0 = chaser) and epoch of leg `k`.
    pub fn departure(&self, k: usize) -> (usize, f64) {
        if k == 0 {
            (0, 0.0)
        } else {
            (self.sequence[k - 1] as usize, self.epochs[k - 1])
        }
    }
}

/// A ballistic arc with its conic elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConicArc {
    pub start: StateVector,
    pub dt: f64,
    pub a: f64,
    pub e: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Impulse {
    pub epoch: f64,
    pub position: Vec2,
    pub dv: Vec2,
    pub magnitude: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub arcs: Vec<ConicArc>,
    pub impulses: Vec<Impulse>,
}

impl Trajectory {
    pub fn total_impulse(&self) -> f64 {
        self.impulses.iter().map(|i| i.magnitude).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LegBreakdown {
    pub target: u32,
    pub epoch: f64,
    pub dv_a: f64,
    pub dv_b: f64,
    pub dv_c: f64,
    pub dv: f64,
    pub lambert_revs: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissionEvaluation {
    pub dv_total: f64,
    pub legs: Vec<LegBreakdown>,
    pub trajectory: Trajectory,
}

/// Penalized total cost of a plan given as flat leg parameters. This is the
/// objective the refinement stages minimize; infeasible legs cost
/// [`INFEASIBLE_PENALTY`] each.
pub fn mission_cost(problem: &MissionProblem, solver: &LambertSolver, sequence: &[u32], epochs: &[f64], legs: &[f64]) -> f64 {
    let k = &problem.constants;
    let mut total = 0.0;
    let mut prev = (0usize, 0.0);
    for (i, (&id, &t)) in sequence.iter().zip(epochs).enumerate() {
        let dep = k.circular_state(problem.body(prev.0), prev.1);
        let params = LegParameters::from_slice(&legs[6 * i..6 * i + 6]);
        total += leg_cost(solver, &dep, problem.body(id as usize), prev.1, t, &params);
        prev = (id as usize, t);
    }
    total
}

/// Evaluates every leg of `plan`, assembles the trajectory and the impulses.
pub fn evaluate_mission(problem: &MissionProblem, solver: &LambertSolver, plan: &MissionPlan) -> Result<MissionEvaluation, MissionError> {
    plan.validate(problem)?;
    let k = &problem.constants;
    let mut legs = Vec::with_capacity(plan.sequence.len());
    let mut traj = Trajectory::default();
    for (i, (&id, params)) in plan.sequence.iter().zip(&plan.legs).enumerate() {
        let (dep_idx, t_dep) = plan.departure(i);
        let dep = k.circular_state(problem.body(dep_idx), t_dep);
        let arr_body = problem.body(id as usize);
        let t_arr = plan.epochs[i];
        let ev = evaluate_leg(solver, &dep, arr_body, t_dep, t_arr, params).map_err(|source| MissionError::InfeasibleLeg { leg: i, source })?;

        let mut incoming = dep.velocity;
        for (arc, v_end) in ev.arcs.iter().zip(&ev.v_end) {
            let dv = arc.start.velocity - incoming;
            traj.impulses.push(Impulse {
                epoch: arc.start.epoch,
                position: arc.start.position,
                dv,
                magnitude: dv.norm(),
            });
            traj.arcs.push(ConicArc {
                start: arc.start,
                dt: arc.dt,
                a: k.semi_major_axis(&arc.start)?,
                e: eccentricity(k, &arc.start),
            });
            incoming = *v_end;
        }
        let arr = k.circular_state(arr_body, t_arr);
        let dv = arr.velocity - incoming;
        traj.impulses.push(Impulse {
            epoch: t_arr,
            position: arr.position,
            dv,
            magnitude: dv.norm(),
        });
        legs.push(breakdown(id, t_arr, &ev));
    }
    let dv_total = legs.iter().map(|l| l.dv).sum();
    Ok(MissionEvaluation {
        dv_total,
        legs,
        trajectory: traj,
    })
}

fn breakdown(target: u32, epoch: f64, ev: &LegEvaluation) -> LegBreakdown {
    LegBreakdown {
        target,
        epoch,
        dv_a: ev.dv_a,
        dv_b: ev.dv_b,
        dv_c: ev.dv_c,
        dv: ev.total(),
        lambert_revs: ev.lambert_index.0,
    }
}

fn eccentricity(k: &Constants, s: &StateVector) -> f64 {
    let r = s.position.norm();
    let v2 = s.velocity.norm_squared();
    let rv = s.position.dot(&s.velocity);
    let e_vec = (s.position * (v2 - k.mu() / r) - s.velocity * rv) / k.mu();
    e_vec.norm()
}

/// Position and velocity misfit at every arc joint and encounter, found by
/// propagating each arc independently and applying the stored impulses.
/// Returns the worst (position km, velocity km/s) pair per leg.
pub fn rendezvous_residuals(problem: &MissionProblem, plan: &MissionPlan, traj: &Trajectory) -> Result<Vec<(f64, f64)>, MissionError> {
    let k = &problem.constants;
    let mut out = Vec::with_capacity(plan.sequence.len());
    for (i, &id) in plan.sequence.iter().enumerate() {
        let mut worst = (0.0f64, 0.0f64);
        for j in 0..3 {
            let arc = &traj.arcs[3 * i + j];
            let end = k.propagate_kepler(&arc.start, arc.dt)?;
            let (pos, vel) = if j < 2 {
                let next = &traj.arcs[3 * i + j + 1].start;
                (next.position, next.velocity)
            } else {
                let s = k.circular_state(problem.body(id as usize), plan.epochs[i]);
                (s.position, s.velocity)
            };
            let v_after = end.velocity + traj.impulses[4 * i + j + 1].dv;
            worst.0 = worst.0.max((end.position - pos).norm());
            worst.1 = worst.1.max((v_after - vel).norm());
        }
        out.push(worst);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub t: f64,
    pub r: f64,
    /// True at impulse epochs.
    pub event: bool,
}

/// Uniform-in-time samples of |r| along every arc, `points_per_arc` per arc
/// including both ends. Arc starts are flagged as impulses, as is the final
/// rendezvous point of each leg.
pub fn export_radius_time_trace(constants: &Constants, traj: &Trajectory, points_per_arc: usize) -> Result<Vec<TracePoint>, OrbitError> {
    let n = points_per_arc.max(2);
    let mut out = Vec::with_capacity(traj.arcs.len() * n);
    for (j, arc) in traj.arcs.iter().enumerate() {
        for i in 0..n {
            let dt = arc.dt * i as f64 / (n - 1) as f64;
            let s = constants.propagate_kepler(&arc.start, dt)?;
            let last_of_leg = i == n - 1 && j % 3 == 2;
            out.push(TracePoint {
                t: arc.start.epoch + dt,
                r: s.position.norm(),
                event: i == 0 || last_of_leg,
            });
        }
    }
    Ok(out)
}

pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TracePoint]) -> std::io::Result<()> {
    writeln!(w, "t_seconds,r_km,event_flag")?;
    for p in trace {
        writeln!(w, "{:.6},{:.9},{}", p.t, p.r, u8::from(p.event))?;
    }
    Ok(())
}

/// True when `cost` is below the per-leg penalty, i.e. every leg was flyable.
pub fn is_feasible_cost(cost: f64) -> bool {
    cost < INFEASIBLE_PENALTY
}
