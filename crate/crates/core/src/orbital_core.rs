//! Planar two-body primitives: circular-orbit kinematics, elliptic Kepler
//! propagation and Hohmann transfers.
//!
//! Everything here works in km, s and rad. Motion is prograde (counter-clockwise
//! about +z) throughout.

use std::f64::consts::{PI, TAU};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;

/// Earth gravitational parameter, km^3/s^2.
pub const EARTH_MU: f64 = 398_600.441_8;

const KEPLER_TOL: f64 = 1e-12;
const KEPLER_MAX_ITER: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrbitError {
    #[error("gravitational parameter must be positive, got {0}")]
    NonPositiveMu(f64),
    #[error("orbit radius must be positive, got {0} km")]
    NonPositiveRadius(f64),
    #[error("state is not bound (specific energy {energy} km^2/s^2 >= 0)")]
    NonElliptic { energy: f64 },
    #[error("position vector has zero length")]
    ZeroPosition,
}

/// Central-body constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    mu: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Self { mu: EARTH_MU }
    }
}

/// A circular, coplanar orbit of the chaser (id 0) or of a target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub id: u32,
    pub radius: f64,
    /// Right ascension at t = 0, in [0, 2π).
    pub theta0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateVector {
    pub position: Vec2,
    pub velocity: Vec2,
    pub epoch: f64,
}

/// Two-impulse transfer between circular orbits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hohmann {
    pub dv: f64,
    pub duration: f64,
}

/// Wraps an angle into [0, 2π).
pub fn wrap_two_pi(angle: f64) -> f64 {
    let w = angle.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Unit vector at `angle` from the x axis.
pub fn radial(angle: f64) -> Vec2 {
    Vec2::new(angle.cos(), angle.sin())
}

/// Prograde unit tangent for a position direction.
pub fn prograde(dir: &Vec2) -> Vec2 {
    Vec2::new(-dir.y, dir.x)
}

/// z component of the planar cross product.
pub fn cross(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Prograde angle swept from `from` to `to`, in [0, 2π).
pub fn sweep_angle(from: &Vec2, to: &Vec2) -> f64 {
    wrap_two_pi(cross(from, to).atan2(from.dot(to)))
}

impl Body {
    pub fn new(id: u32, radius: f64, theta0: f64) -> Result<Self, OrbitError> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(OrbitError::NonPositiveRadius(radius));
        }
        Ok(Self {
            id,
            radius,
            theta0: wrap_two_pi(theta0),
        })
    }

    pub fn from_degrees(id: u32, radius: f64, theta0_deg: f64) -> Result<Self, OrbitError> {
        Self::new(id, radius, theta0_deg.to_radians())
    }
}

impl StateVector {
    pub fn new(position: Vec2, velocity: Vec2, epoch: f64) -> Self {
        Self { position, velocity, epoch }
    }
}

impl Constants {
    pub fn new(mu: f64) -> Result<Self, OrbitError> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(OrbitError::NonPositiveMu(mu));
        }
        Ok(Self { mu })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn angular_rate(&self, radius: f64) -> f64 {
        (self.mu / radius.powi(3)).sqrt()
    }

    pub fn circular_speed(&self, radius: f64) -> f64 {
        (self.mu / radius).sqrt()
    }

    pub fn period(&self, radius: f64) -> f64 {
        TAU * (radius.powi(3) / self.mu).sqrt()
    }

    /// Unwrapped right ascension of `body` at time `t`.
    pub fn phase(&self, body: &Body, t: f64) -> f64 {
        body.theta0 + self.angular_rate(body.radius) * t
    }

    pub fn circular_state(&self, body: &Body, t: f64) -> StateVector {
        let dir = radial(self.phase(body, t));
        StateVector {
            position: dir * body.radius,
            velocity: prograde(&dir) * self.circular_speed(body.radius),
            epoch: t,
        }
    }

    pub fn specific_energy(&self, state: &StateVector) -> f64 {
        0.5 * state.velocity.norm_squared() - self.mu / state.position.norm()
    }

    pub fn angular_momentum(&self, state: &StateVector) -> f64 {
        cross(&state.position, &state.velocity)
    }

    /// Semi-major axis of a bound state.
    pub fn semi_major_axis(&self, state: &StateVector) -> Result<f64, OrbitError> {
        let energy = self.specific_energy(state);
        if !(energy < 0.0) {
            return Err(OrbitError::NonElliptic { energy });
        }
        Ok(-self.mu / (2.0 * energy))
    }

    /// Conic propagation of a bound state by `dt` seconds.
    ///
    /// Whole periods are removed first, then the eccentric-anomaly increment
    /// over the remainder is found with a bisection-guarded Newton iteration.
    /// The increment form has no singularity at e = 0.
    pub fn propagate_kepler(&self, state: &StateVector, dt: f64) -> Result<StateVector, OrbitError> {
        let r0v = state.position;
        let v0v = state.velocity;
        let r0 = r0v.norm();
        if r0 == 0.0 {
            return Err(OrbitError::ZeroPosition);
        }
        if dt == 0.0 {
            return Ok(*state);
        }
        let a = self.semi_major_axis(state)?;
        let n = (self.mu / a.powi(3)).sqrt();
        let period = TAU / n;
        let revs = (dt / period).floor();
        let rem = dt - revs * period;

        let sqrt_a = a.sqrt();
        let sigma = r0v.dot(&v0v) / self.mu.sqrt() / sqrt_a;
        let ecos = 1.0 - r0 / a;
        let target = n * rem;
        let kepler = |x: f64| x + sigma * (1.0 - x.cos()) - ecos * x.sin() - target;
        let dkepler = |x: f64| 1.0 + sigma * x.sin() - ecos * x.cos();

        let (mut lo, mut hi) = (0.0_f64, TAU);
        let mut x = target.clamp(lo, hi);
        for _ in 0..KEPLER_MAX_ITER {
            let f = kepler(x);
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let d = dkepler(x);
            let mut next = x - f / d;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let step = (next - x).abs();
            x = next;
            if step < KEPLER_TOL || hi - lo < KEPLER_TOL {
                break;
            }
        }

        let (s, c) = x.sin_cos();
        let f = 1.0 - a / r0 * (1.0 - c);
        let g = rem - (x - s) / n;
        let r = a + (r0 - a) * c + sigma * a * s;
        let fdot = -(self.mu * a).sqrt() * s / (r * r0);
        let gdot = 1.0 - a / r * (1.0 - c);
        Ok(StateVector {
            position: r0v * f + v0v * g,
            velocity: r0v * fdot + v0v * gdot,
            epoch: state.epoch + dt,
        })
    }

    pub fn hohmann(&self, r1: f64, r2: f64) -> Hohmann {
        let a = 0.5 * (r1 + r2);
        let v_peri = (self.mu * (2.0 / r1 - 1.0 / a)).sqrt();
        let v_apo = (self.mu * (2.0 / r2 - 1.0 / a)).sqrt();
        let dv = if r1 == r2 {
            0.0
        } else {
            (v_peri - self.circular_speed(r1)).abs() + (self.circular_speed(r2) - v_apo).abs()
        };
        Hohmann {
            dv,
            duration: PI * (a.powi(3) / self.mu).sqrt(),
        }
    }
}
