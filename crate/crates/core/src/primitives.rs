//! Offline generation of the motion-primitive library.
//!
//! Each primitive flies at constant forward speed `V` with a yaw rate of
//! `A sin(pi t / T)`, so the yaw rate vanishes at both ends and consecutive
//! primitives chain without yaw-rate jumps. Heading has the closed form
//! `psi(t) = (A T / pi) (1 - cos(pi t / T))`; position is integrated with
//! fixed-step RK4.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};

/// Parameters of one primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    /// Forward speed, m/s.
    pub speed: f64,
    /// Peak yaw rate, rad/s. Positive turns left.
    pub yaw_amplitude: f64,
    /// Duration, s.
    pub horizon: f64,
    pub n_waypoints: usize,
}

impl PrimitiveSpec {
    /// Time between waypoints.
    pub fn dt(&self) -> f64 {
        self.horizon / (self.n_waypoints - 1) as f64
    }

    pub fn waypoint_time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / (self.n_waypoints - 1) as f64
    }

    /// Commanded yaw rate. Evaluated on the nearer half of the sinusoid so
    /// that both endpoints are exactly zero.
    pub fn yaw_rate_at(&self, t: f64) -> f64 {
        let s = (t / self.horizon).clamp(0.0, 1.0);
        let s = if s > 0.5 { 1.0 - s } else { s };
        self.yaw_amplitude * (PI * s).sin()
    }

    /// Heading relative to the start of the primitive.
    pub fn heading_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, self.horizon);
        self.yaw_amplitude * self.horizon / PI * (1.0 - (PI * t / self.horizon).cos())
    }

    /// Total heading change over the primitive, `2 A T / pi`.
    pub fn net_heading_change(&self) -> f64 {
        self.heading_at(self.horizon)
    }
}

/// Open-loop command at a waypoint time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setpoint {
    pub forward_speed: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub spec: PrimitiveSpec,
    /// Body-frame waypoints, planar (z = 0), starting at the origin.
    pub waypoints: Vec<Vec3>,
    pub setpoints: Vec<Setpoint>,
}

impl Primitive {
    /// Integrates one primitive using `substeps` RK4 steps per waypoint
    /// interval.
    pub fn integrate(spec: PrimitiveSpec, substeps: usize) -> Self {
        let n = spec.n_waypoints;
        let substeps = substeps.max(1);
        let h = spec.dt() / substeps as f64;
        let vel = |t: f64| {
            let psi = spec.heading_at(t);
            (spec.speed * psi.cos(), spec.speed * psi.sin())
        };
        let mut waypoints = Vec::with_capacity(n);
        let (mut x, mut y) = (0.0f64, 0.0f64);
        waypoints.push(Vec3::zeros());
        for k in 0..n - 1 {
            let t0 = spec.waypoint_time(k);
            for s in 0..substeps {
                let t = t0 + s as f64 * h;
                // Right-hand side is independent of state.
                let k1 = vel(t);
                let k2 = vel(t + 0.5 * h);
                let k4 = vel(t + h);
                x += h / 6.0 * (k1.0 + 4.0 * k2.0 + k4.0);
                y += h / 6.0 * (k1.1 + 4.0 * k2.1 + k4.1);
            }
            waypoints.push(Vec3::new(x, y, 0.0));
        }
        let setpoints = (0..n)
            .map(|k| Setpoint {
                forward_speed: spec.speed,
                yaw_rate: spec.yaw_rate_at(spec.waypoint_time(k)),
            })
            .collect();
        Self {
            spec,
            waypoints,
            setpoints,
        }
    }

    /// Body-frame position (linear between waypoints) and heading at time
    /// `t` into the primitive.
    pub fn state_at(&self, t: f64) -> (Vec3, f64) {
        let t = t.clamp(0.0, self.spec.horizon);
        let f = t / self.spec.dt();
        let k = (f.floor() as usize).min(self.waypoints.len() - 2);
        let a = (f - k as f64).clamp(0.0, 1.0);
        let p = if a == 0.0 {
            self.waypoints[k]
        } else if a == 1.0 {
            self.waypoints[k + 1]
        } else {
            self.waypoints[k] * (1.0 - a) + self.waypoints[k + 1] * a
        };
        (p, self.spec.heading_at(t))
    }

    /// Waypoints placed at the body pose: rotated by its yaw, translated by
    /// its position, at height `flight_height`.
    pub fn to_world(&self, pose: &Pose, flight_height: f64) -> Vec<Vec3> {
        to_world(&self.waypoints, pose, flight_height)
    }
}

pub fn to_world(body: &[Vec3], pose: &Pose, flight_height: f64) -> Vec<Vec3> {
    let yaw = pose.yaw();
    let (s, c) = yaw.sin_cos();
    let t = pose.translation();
    body.iter()
        .map(|p| Vec3::new(t.x + c * p.x - s * p.y, t.y + s * p.x + c * p.y, flight_height))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LibraryParams {
    /// Forward speed V, m/s.
    pub speed: f64,
    /// Largest yaw-rate amplitude, rad/s; amplitudes span [-max, max].
    pub max_yaw_rate: f64,
    pub count: usize,
    /// Horizon T, s.
    pub horizon: f64,
    pub n_waypoints: usize,
    /// RK4 steps per waypoint interval.
    pub substeps: usize,
}

impl Default for LibraryParams {
    fn default() -> Self {
        Self {
            speed: 0.5,
            max_yaw_rate: 0.7,
            count: 7,
            horizon: 1.0,
            n_waypoints: 21,
            substeps: 16,
        }
    }
}

impl LibraryParams {
    pub fn validate(&self, key: &str) -> Result<()> {
        let k = |f: &str| format!("{key}.{f}");
        if !(self.speed.is_finite() && self.speed > 0.0) {
            return Err(Error::config(k("speed"), "must be finite and > 0"));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::config(k("horizon"), "must be finite and > 0"));
        }
        if !(self.max_yaw_rate.is_finite() && self.max_yaw_rate >= 0.0) {
            return Err(Error::config(k("max_yaw_rate"), "must be finite and >= 0"));
        }
        if self.count == 0 {
            return Err(Error::config(k("count"), "must be >= 1"));
        }
        if self.n_waypoints < 2 {
            return Err(Error::config(k("n_waypoints"), "must be >= 2"));
        }
        if self.substeps == 0 {
            return Err(Error::config(k("substeps"), "must be >= 1"));
        }
        Ok(())
    }

    /// Evenly spaced amplitudes in ascending order. Computed as an exact
    /// integer ratio so that +A and -A are bitwise negations.
    pub fn amplitudes(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![0.0];
        }
        let m = (self.count - 1) as i64;
        (0..=m)
            .map(|k| {
                let num = 2 * k - m;
                if num == 0 {
                    0.0
                } else {
                    self.max_yaw_rate * num as f64 / m as f64
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveLibrary {
    pub params: LibraryParams,
    pub primitives: Vec<Primitive>,
}

impl PrimitiveLibrary {
    pub fn generate(params: LibraryParams) -> Result<Self> {
        params.validate("library")?;
        let primitives = params
            .amplitudes()
            .into_iter()
            .map(|a| {
                Primitive::integrate(
                    PrimitiveSpec {
                        speed: params.speed,
                        yaw_amplitude: a,
                        horizon: params.horizon,
                        n_waypoints: params.n_waypoints,
                    },
                    params.substeps,
                )
            })
            .collect();
        Ok(Self { params, primitives })
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Primitive> {
        self.primitives.get(i)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let lib: Self = serde_json::from_str(s)?;
        if lib.primitives.is_empty() {
            return Err(Error::format("library", "no primitives"));
        }
        if lib.primitives.iter().any(|p| p.waypoints.is_empty()) {
            return Err(Error::format("library", "primitive without waypoints"));
        }
        Ok(lib)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// Checks that the primitive with amplitude -A is the y-mirror of the one
/// with +A, to within `1e-9`.
pub fn mirror_symmetry_check(lib: &PrimitiveLibrary) -> bool {
    lib.primitives.iter().all(|p| {
        let a = p.spec.yaw_amplitude;
        let Some(m) = lib
            .primitives
            .iter()
            .find(|q| (q.spec.yaw_amplitude + a).abs() <= 1e-12)
        else {
            return false;
        };
        p.waypoints.len() == m.waypoints.len()
            && p.waypoints.iter().zip(&m.waypoints).all(|(w, v)| {
                (w.x - v.x).abs() <= 1e-9 && (w.y + v.y).abs() <= 1e-9 && (w.z - v.z).abs() <= 1e-9
            })
    })
}
