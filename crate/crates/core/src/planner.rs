//! Primitive selection under a hard clearance constraint.
//!
//! Every primitive is placed at the current pose and scored by its closest
//! waypoint to the goal. A primitive is feasible when none of its waypoints
//! comes closer than the clearance to any occupied voxel center. The
//! feasible primitive nearest the goal wins; ties go to the smaller |yaw
//! amplitude| and then to library order. With nothing feasible the vehicle
//! is told to stop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::primitives::PrimitiveLibrary;
use crate::spatial::{distance, UniformGrid};

/// Minimum waypoint-to-point distance along a trajectory.
pub fn trajectory_point_distance(traj: &[Vec3], x: &Vec3) -> f64 {
    traj.iter()
        .map(|w| distance(w, x))
        .fold(f64::INFINITY, f64::min)
}

/// Closest approach between a trajectory and a set of points; infinite for
/// an empty set.
pub fn trajectory_clearance(traj: &[Vec3], obstacles: &[Vec3]) -> f64 {
    obstacles
        .iter()
        .map(|o| trajectory_point_distance(traj, o))
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy)]
pub struct PlanQuery<'a> {
    /// Current body pose; only position and yaw are used.
    pub pose: Pose,
    pub goal: Vec3,
    /// Occupied voxel centers.
    pub obstacles: &'a [Vec3],
    pub clearance: f64,
    pub flight_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub yaw_amplitude: f64,
    pub waypoints: Vec<Vec3>,
    pub goal_distance: f64,
    /// Closest approach to any obstacle (infinite with no obstacles).
    pub clearance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    NoFeasiblePrimitive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlanResult {
    Selected(Selection),
    Stop(StopReason),
}

impl PlanResult {
    pub fn selection(&self) -> Option<&Selection> {
        match self {
            PlanResult::Selected(s) => Some(s),
            PlanResult::Stop(_) => None,
        }
    }

    pub fn is_stop(&self) -> bool {
        matches!(self, PlanResult::Stop(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveScore {
    pub index: usize,
    pub goal_distance: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    /// Minimum waypoint-to-obstacle distance, meters.
    pub clearance: f64,
    /// Horizontal goal radius, meters.
    pub goal_radius: f64,
    /// Obstacle count above which feasibility uses a hash-grid index.
    pub index_threshold: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            clearance: 0.5,
            goal_radius: 0.5,
            index_threshold: 10_000,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self, key: &str) -> Result<()> {
        if !(self.clearance.is_finite() && self.clearance > 0.0) {
            return Err(Error::config(format!("{key}.clearance"), "must be finite and > 0"));
        }
        if !(self.goal_radius.is_finite() && self.goal_radius > 0.0) {
            return Err(Error::config(format!("{key}.goal_radius"), "must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Planner {
    pub index_threshold: usize,
}

impl Default for Planner {
    fn default() -> Self {
        Self {
            index_threshold: PlannerConfig::default().index_threshold,
        }
    }
}

impl Planner {
    pub fn new(index_threshold: usize) -> Self {
        Self { index_threshold }
    }

    /// Goal distance and feasibility of every primitive, in library order.
    pub fn evaluate(&self, lib: &PrimitiveLibrary, q: &PlanQuery) -> Vec<PrimitiveScore> {
        let grid = (q.obstacles.len() > self.index_threshold)
            .then(|| UniformGrid::build(q.obstacles, q.clearance));
        lib.primitives
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let wps = p.to_world(&q.pose, q.flight_height);
                let feasible = match &grid {
                    Some(g) => !wps.iter().any(|w| g.any_closer_than(w, q.clearance)),
                    None => trajectory_clearance(&wps, q.obstacles) >= q.clearance,
                };
                PrimitiveScore {
                    index,
                    goal_distance: trajectory_point_distance(&wps, &q.goal),
                    feasible,
                }
            })
            .collect()
    }

    pub fn select(&self, lib: &PrimitiveLibrary, q: &PlanQuery) -> PlanResult {
        let scores = self.evaluate(lib, q);
        let amp = |i: usize| lib.primitives[i].spec.yaw_amplitude.abs();
        let best = scores.iter().filter(|s| s.feasible).fold(None, |best: Option<&PrimitiveScore>, s| {
            match best {
                None => Some(s),
                Some(b) => {
                    let better = s.goal_distance < b.goal_distance
                        || (s.goal_distance == b.goal_distance && amp(s.index) < amp(b.index));
                    Some(if better { s } else { b })
                }
            }
        });
        match best {
            None => PlanResult::Stop(StopReason::NoFeasiblePrimitive),
            Some(s) => {
                let p = &lib.primitives[s.index];
                let waypoints = p.to_world(&q.pose, q.flight_height);
                let clearance = trajectory_clearance(&waypoints, q.obstacles);
                PlanResult::Selected(Selection {
                    index: s.index,
                    yaw_amplitude: p.spec.yaw_amplitude,
                    waypoints,
                    goal_distance: s.goal_distance,
                    clearance,
                })
            }
        }
    }
}

/// Selects a primitive with the default index threshold.
pub fn select_primitive(lib: &PrimitiveLibrary, q: &PlanQuery) -> PlanResult {
    Planner::default().select(lib, q)
}

/// Closed-ball test on horizontal distance.
pub fn goal_reached(pose: &Pose, goal: &Vec3, radius: f64) -> bool {
    horizontal_distance(&pose.translation(), goal) <= radius
}

pub fn horizontal_distance(a: &Vec3, b: &Vec3) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}
