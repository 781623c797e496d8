//! Closed-loop run configuration. Every section deserializes with defaults
//! for missing keys and rejects unknown ones.

use serde::{Deserialize, Serialize};

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::planner::PlannerConfig;
use crate::primitives::LibraryParams;
use crate::sim::NoiseModel;
use crate::tsdf::{OccupancyFilter, TsdfParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Time between depth frames, s.
    pub sensor_period: f64,
    /// Time between planner calls, s. Must be a multiple of the sensor
    /// period and no longer than the primitive horizon.
    pub replan_period: f64,
    /// Frames fused while flying straight before planning starts.
    pub warm_start_frames: usize,
    /// Sensor steps before the episode is cut off.
    pub max_steps: usize,
    /// Collision sphere radius, m.
    pub robot_radius: f64,
    /// Ray-cast range of the simulated depth camera, m.
    pub max_range: f64,
    /// Frames of latency between capture and fusion.
    pub frame_delay: usize,
    /// Std of the position error (m) on the pose used for fusion.
    pub odometry_sigma: f64,
    /// Fuse only the newest N frames when set.
    pub fusion_window: Option<usize>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            sensor_period: 0.25,
            replan_period: 1.0,
            warm_start_frames: 8,
            max_steps: 400,
            robot_radius: 0.1,
            max_range: 6.0,
            frame_delay: 0,
            odometry_sigma: 0.0,
            fusion_window: None,
        }
    }
}

impl LoopConfig {
    /// Sensor steps per replan.
    pub fn replan_every(&self) -> usize {
        (self.replan_period / self.sensor_period).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub camera: Intrinsics,
    pub tsdf: TsdfParams,
    pub occupancy: OccupancyFilter,
    pub library: LibraryParams,
    pub planner: PlannerConfig,
    pub sim: LoopConfig,
    pub noise: NoiseModel,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate("camera")?;
        self.tsdf.validate("tsdf")?;
        self.occupancy.validate("occupancy")?;
        self.library.validate("library")?;
        self.planner.validate("planner")?;
        self.noise.validate("noise")?;
        let s = &self.sim;
        let pos = |key: &str, v: f64| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("sim.{key}"), "must be finite and > 0"))
            }
        };
        pos("sensor_period", s.sensor_period)?;
        pos("replan_period", s.replan_period)?;
        pos("robot_radius", s.robot_radius)?;
        pos("max_range", s.max_range)?;
        let ratio = s.replan_period / s.sensor_period;
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-9 {
            return Err(Error::config(
                "sim.replan_period",
                "must be a whole multiple of sim.sensor_period",
            ));
        }
        if s.replan_period > self.library.horizon + 1e-9 {
            return Err(Error::config(
                "sim.replan_period",
                "must not exceed library.horizon",
            ));
        }
        if s.max_steps == 0 {
            return Err(Error::config("sim.max_steps", "must be >= 1"));
        }
        if !(s.odometry_sigma.is_finite() && s.odometry_sigma >= 0.0) {
            return Err(Error::config("sim.odometry_sigma", "must be finite and >= 0"));
        }
        if s.fusion_window == Some(0) {
            return Err(Error::config("sim.fusion_window", "must be >= 1"));
        }
        Ok(())
    }
}
