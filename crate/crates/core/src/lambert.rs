//! Planar multi-revolution Lambert solver.
//!
//! Izzo's single-variable formulation: the non-dimensional time of flight
//! `T(x)` is solved for the Lagrange variable `x ∈ (-1, 1)` (elliptic arcs
//! only). For `M ≥ 1` revolutions the curve `T(x)` is convex with a single
//! minimum `T_min`; the left branch lies below `x(T_min)`, the right branch
//! above it. Every root search is a Newton iteration kept inside a bisection
//! bracket, so it cannot leave the elliptic domain.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orbital_core::{cross, prograde, sweep_angle, Constants, Vec2};

pub const DEFAULT_N_MAX: u32 = 50;
const ANGLE_EPS: f64 = 1e-10;
const X_TOL: f64 = 1e-12;
const MAX_ITER: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LambertError {
    #[error("no {revs}-revolution elliptic solution for this time of flight")]
    NoSolution { revs: u32 },
    #[error("transfer angle is a multiple of 2π; the transfer conic is undefined")]
    DegenerateGeometry,
    #[error("solution index {index} outside [-{n_max}, {n_max}]")]
    IndexOutOfRange { index: i32, n_max: u32 },
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
}

/// Signed solution index: `|L|` is the revolution count, `L > 0` selects the
/// right branch and `L < 0` the left branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LambertIndex(pub i32);

impl LambertIndex {
    pub fn revs(self) -> u32 {
        self.0.unsigned_abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambertSolution {
    pub v_dep: Vec2,
    pub v_arr: Vec2,
    pub index: LambertIndex,
}

#[derive(Debug, Clone, Copy)]
pub struct LambertSolver {
    pub constants: Constants,
    pub n_max: u32,
}

/// Non-dimensional geometry shared by every solution of one boundary-value problem.
struct Geometry {
    r1: f64,
    r2: f64,
    ir1: Vec2,
    ir2: Vec2,
    lambda: f64,
    // 1 - λ², kept separately to avoid cancellation as |λ| → 1
    one_m_l2: f64,
    tof: f64,
    gamma: f64,
    rho: f64,
    sigma: f64,
}

impl LambertSolver {
    pub fn new(constants: Constants) -> Self {
        Self {
            constants,
            n_max: DEFAULT_N_MAX,
        }
    }

    pub fn with_n_max(mut self, n_max: u32) -> Self {
        self.n_max = n_max;
        self
    }

    pub fn solve(&self, r_dep: &Vec2, r_arr: &Vec2, dt: f64, index: LambertIndex) -> Result<LambertSolution, LambertError> {
        if index.revs() > self.n_max {
            return Err(LambertError::IndexOutOfRange {
                index: index.0,
                n_max: self.n_max,
            });
        }
        let geo = self.geometry(r_dep, r_arr, dt)?;
        let revs = index.revs();
        let x = if revs == 0 {
            zero_rev_root(geo.lambda, geo.tof)?
        } else {
            let (left, right) = multi_rev_roots(geo.lambda, geo.tof, revs)?;
            if index.0 > 0 {
                right
            } else {
                left
            }
        };
        Ok(geo.velocities(x, index))
    }

    /// Left and right solutions for `target_revs - 1 ..= target_revs + 1`
    /// revolutions (clipped at zero). Infeasible counts are skipped.
    pub fn candidates(&self, r_dep: &Vec2, r_arr: &Vec2, dt: f64, target_revs: u32) -> Vec<LambertSolution> {
        let Ok(geo) = self.geometry(r_dep, r_arr, dt) else {
            return Vec::new();
        };
        let lo = target_revs.saturating_sub(1);
        let hi = (target_revs + 1).min(self.n_max);
        let mut out = Vec::with_capacity(6);
        for revs in lo..=hi {
            if revs == 0 {
                if let Ok(x) = zero_rev_root(geo.lambda, geo.tof) {
                    out.push(geo.velocities(x, LambertIndex(0)));
                }
            } else if let Ok((left, right)) = multi_rev_roots(geo.lambda, geo.tof, revs) {
                let m = revs as i32;
                out.push(geo.velocities(left, LambertIndex(-m)));
                out.push(geo.velocities(right, LambertIndex(m)));
            }
        }
        out
    }

    fn geometry(&self, r_dep: &Vec2, r_arr: &Vec2, dt: f64) -> Result<Geometry, LambertError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(LambertError::InvalidInput("time of flight must be positive"));
        }
        let r1 = r_dep.norm();
        let r2 = r_arr.norm();
        if r1 == 0.0 || r2 == 0.0 {
            return Err(LambertError::InvalidInput("zero position vector"));
        }
        let angle = sweep_angle(r_dep, r_arr);
        if angle < ANGLE_EPS || TAU - angle < ANGLE_EPS {
            return Err(LambertError::DegenerateGeometry);
        }
        let c = (r_arr - r_dep).norm();
        let s = 0.5 * (r1 + r2 + c);
        let mut lambda = (1.0 - c / s).max(0.0).sqrt();
        // In the plane, prograde motion fixes the orbit normal to +z; transfers
        // sweeping more than π take the negative root.
        if cross(r_dep, r_arr) < 0.0 {
            lambda = -lambda;
        }
        let mu = self.constants.mu();
        let rho = (r1 - r2) / c;
        Ok(Geometry {
            r1,
            r2,
            ir1: r_dep / r1,
            ir2: r_arr / r2,
            lambda,
            one_m_l2: c / s,
            tof: dt * (2.0 * mu / s.powi(3)).sqrt(),
            gamma: (mu * s / 2.0).sqrt(),
            rho,
            sigma: (1.0 - rho * rho).max(0.0).sqrt(),
        })
    }
}

impl Geometry {
    fn velocities(&self, x: f64, index: LambertIndex) -> LambertSolution {
        let l = self.lambda;
        let k = self.one_m_l2;
        let y = (k + l * l * x * x).sqrt();
        let (g, rho, sigma) = (self.gamma, self.rho, self.sigma);
        // y + λx and λy + x rewritten as quotients; the direct sums cancel
        // when λ and x have opposite signs
        let y_plus_lx = k / (y - l * x);
        let ly_plus_x = if l * x >= 0.0 {
            l * y + x
        } else {
            k * (l * l * (1.0 - x * x) - x * x) / (l * y - x)
        };
        let vr1 = g * ((l * y - x) - rho * ly_plus_x) / self.r1;
        let vr2 = -g * ((l * y - x) + rho * ly_plus_x) / self.r2;
        let vt1 = g * sigma * y_plus_lx / self.r1;
        let vt2 = g * sigma * y_plus_lx / self.r2;
        LambertSolution {
            v_dep: self.ir1 * vr1 + prograde(&self.ir1) * vt1,
            v_arr: self.ir2 * vr2 + prograde(&self.ir2) * vt2,
            index,
        }
    }
}

fn y_of(x: f64, lambda: f64) -> f64 {
    (1.0 - lambda * lambda * (1.0 - x * x)).max(0.0).sqrt()
}

/// Gauss hypergeometric 2F1(3, 1; 5/2; z), |z| < 1.
fn hyp2f1_3_1_52(z: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let mut j = 0.0;
    loop {
        term *= (3.0 + j) / (2.5 + j) * z;
        sum += term;
        j += 1.0;
        if term.abs() < 1e-17 * sum.abs() || j > 1000.0 {
            return sum;
        }
    }
}

/// Non-dimensional time of flight for an elliptic `x`.
fn tof_of(x: f64, lambda: f64, revs: u32) -> f64 {
    let y = y_of(x, lambda);
    if revs == 0 && x > 0.6_f64.sqrt() {
        // series form avoids cancellation near the parabola
        let eta = y - lambda * x;
        let s1 = 0.5 * (1.0 - lambda - x * eta);
        let q = 4.0 / 3.0 * hyp2f1_3_1_52(s1);
        return 0.5 * (eta.powi(3) * q + 4.0 * lambda * eta);
    }
    let omx2 = 1.0 - x * x;
    // atan2 keeps ψ accurate where acos is flat (cos ψ near ±1)
    let psi = ((y - lambda * x) * omx2.sqrt()).atan2(x * y + lambda * omx2);
    ((psi + revs as f64 * PI) / omx2.sqrt() - x + lambda * y) / omx2
}

/// First and second derivatives of `T(x)`.
fn tof_derivs(x: f64, t: f64, lambda: f64) -> (f64, f64) {
    let y = y_of(x, lambda);
    let omx2 = 1.0 - x * x;
    let l2 = lambda * lambda;
    let l3 = l2 * lambda;
    let d1 = (3.0 * t * x - 2.0 + 2.0 * l3 * x / y) / omx2;
    let d2 = (3.0 * t + 5.0 * x * d1 + 2.0 * (1.0 - l2) * l3 / y.powi(3)) / omx2;
    (d1, d2)
}

/// Newton iteration on `f` constrained to the open bracket `(lo, hi)`;
/// `f(lo) > 0 > f(hi)` orientation is given by `decreasing`.
fn bracketed_newton(mut lo: f64, mut hi: f64, guess: f64, decreasing: bool, mut f_df: impl FnMut(f64) -> (f64, f64)) -> Option<f64> {
    let mut x = if guess > lo && guess < hi { guess } else { 0.5 * (lo + hi) };
    for _ in 0..MAX_ITER {
        let (f, df) = f_df(x);
        if f == 0.0 {
            return Some(x);
        }
        if (f > 0.0) == decreasing {
            lo = x;
        } else {
            hi = x;
        }
        let mut next = x - f / df;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        let step = (next - x).abs();
        x = next;
        if step < X_TOL {
            // polish while the residual keeps shrinking
            let (mut f, mut df) = f_df(x);
            for _ in 0..4 {
                let cand = x - f / df;
                let (fc, dfc) = f_df(cand);
                if !(fc.abs() < f.abs()) {
                    break;
                }
                (x, f, df) = (cand, fc, dfc);
            }
            return Some(x);
        }
    }
    None
}

fn zero_rev_root(lambda: f64, tof: f64) -> Result<f64, LambertError> {
    let t_parabolic = 2.0 / 3.0 * (1.0 - lambda.powi(3));
    if tof <= t_parabolic {
        return Err(LambertError::NoSolution { revs: 0 });
    }
    let t00 = lambda.acos() + lambda * (1.0 - lambda * lambda).sqrt();
    let guess = if tof >= t00 {
        (t00 / tof).powf(2.0 / 3.0) - 1.0
    } else {
        (2.0_f64.ln() * (tof / t00).ln() / (t_parabolic / t00).ln()).exp() - 1.0
    };
    bracketed_newton(-1.0, 1.0, guess, true, |x| {
        let t = tof_of(x, lambda, 0);
        (t - tof, tof_derivs(x, t, lambda).0)
    })
    .ok_or(LambertError::NoSolution { revs: 0 })
}

/// Location of the minimum of `T(x)` for `revs ≥ 1`.
fn x_at_min_tof(lambda: f64, revs: u32) -> Option<f64> {
    // dT/dx is increasing on (-1, 1): negative near -1, positive near 1
    bracketed_newton(-1.0, 1.0, 0.0, false, |x| {
        let t = tof_of(x, lambda, revs);
        let (d1, d2) = tof_derivs(x, t, lambda);
        (d1, d2)
    })
}

fn multi_rev_roots(lambda: f64, tof: f64, revs: u32) -> Result<(f64, f64), LambertError> {
    let no = LambertError::NoSolution { revs };
    let x_min = x_at_min_tof(lambda, revs).ok_or(no.clone())?;
    let t_min = tof_of(x_min, lambda, revs);
    if tof < t_min {
        return Err(no);
    }
    let m = revs as f64;
    let a = ((m * PI + PI) / (8.0 * tof)).powf(2.0 / 3.0);
    let guess_left = (a - 1.0) / (a + 1.0);
    let b = (8.0 * tof / (m * PI)).powf(2.0 / 3.0);
    let guess_right = (b - 1.0) / (b + 1.0);
    let f = |x: f64| {
        let t = tof_of(x, lambda, revs);
        (t - tof, tof_derivs(x, t, lambda).0)
    };
    let left = bracketed_newton(-1.0, x_min, guess_left, true, f).ok_or(no.clone())?;
    let right = bracketed_newton(x_min, 1.0, guess_right, false, f).ok_or(no)?;
    Ok((left, right))
}

/// Minimum time of flight (s) for an elliptic transfer with `revs`
/// revolutions, or `None` for degenerate geometry.
pub fn min_time_of_flight(constants: &Constants, r_dep: &Vec2, r_arr: &Vec2, revs: u32) -> Option<f64> {
    let solver = LambertSolver::new(*constants);
    let geo = solver.geometry(r_dep, r_arr, 1.0).ok()?;
    let scale = geo.tof; // non-dimensional units per second
    let t = if revs == 0 {
        2.0 / 3.0 * (1.0 - geo.lambda.powi(3))
    } else {
        let x = x_at_min_tof(geo.lambda, revs)?;
        tof_of(x, geo.lambda, revs)
    };
    Some(t / scale)
}
