//! Box worlds, the ray-cast depth camera and collision checks.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{DepthImage, Intrinsics};
use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    /// Closed containment.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Euclidean distance from `p` to the box; zero inside.
    pub fn distance(&self, p: &Vec3) -> f64 {
        let mut s = 0.0;
        for i in 0..3 {
            let d = (self.min[i] - p[i]).max(0.0).max(p[i] - self.max[i]);
            s += d * d;
        }
        s.sqrt()
    }

    /// Slab test. Returns the ray parameter where `origin + t * dir` enters
    /// the box, if that happens at `t > 0`. Rays starting inside miss.
    pub fn ray_entry(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < self.min[i] || origin[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[i];
            let (a, b) = {
                let a = (self.min[i] - origin[i]) * inv;
                let b = (self.max[i] - origin[i]) * inv;
                if a <= b { (a, b) } else { (b, a) }
            };
            t0 = t0.max(a);
            t1 = t1.min(b);
            if t0 > t1 {
                return None;
            }
        }
        (t0 > 0.0).then_some(t0)
    }

    fn inflate(&self, m: f64) -> Self {
        let d = Vec3::new(m, m, m);
        Self::new(self.min - d, self.max + d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub name: String,
    pub boxes: Vec<Aabb>,
    pub start_position: Vec3,
    /// Radians.
    pub start_yaw: f64,
    pub goal: Vec3,
    pub flight_height: f64,
    /// Leaving this box counts as a collision.
    pub arena: Option<Aabb>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoxFile {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartFile {
    position: [f64; 3],
    yaw_deg: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    boxes: Vec<BoxFile>,
    start: StartFile,
    goal: [f64; 3],
    flight_height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arena: Option<BoxFile>,
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl Scene {
    /// Scene with the default arena: the bounding box of boxes, start and
    /// goal grown by 1 m.
    pub fn new(
        name: impl Into<String>,
        boxes: Vec<Aabb>,
        start_position: Vec3,
        start_yaw: f64,
        goal: Vec3,
        flight_height: f64,
    ) -> Result<Self> {
        let mut s = Self {
            name: name.into(),
            boxes,
            start_position,
            start_yaw,
            goal,
            flight_height,
            arena: None,
        };
        s.arena = Some(s.bounds().inflate(1.0));
        s.validate()?;
        Ok(s)
    }

    fn bounds(&self) -> Aabb {
        let mut lo = self.start_position.inf(&self.goal);
        let mut hi = self.start_position.sup(&self.goal);
        for b in &self.boxes {
            lo = lo.inf(&b.min);
            hi = hi.sup(&b.max);
        }
        Aabb::new(lo, hi)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            let ok = (0..3).all(|k| b.min[k].is_finite() && b.max[k].is_finite() && b.min[k] < b.max[k]);
            if !ok {
                return Err(Error::config(format!("boxes[{i}]"), "min must be < max componentwise"));
            }
        }
        let finite = |v: &Vec3| v.iter().all(|x| x.is_finite());
        if !finite(&self.start_position) || !self.start_yaw.is_finite() {
            return Err(Error::config("start", "must be finite"));
        }
        if !finite(&self.goal) {
            return Err(Error::config("goal", "must be finite"));
        }
        if !(self.flight_height.is_finite() && self.flight_height > 0.0) {
            return Err(Error::config("flight_height", "must be finite and > 0"));
        }
        if let Some(i) = self.boxes.iter().position(|b| b.contains(&self.start_position)) {
            return Err(Error::config("start.position", format!("lies inside boxes[{i}]")));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: SceneFile = serde_json::from_str(s)?;
        let mut scene = Scene {
            name: f.name.unwrap_or_else(|| "scene".to_string()),
            boxes: f.boxes.iter().map(|b| Aabb::new(v3(b.min), v3(b.max))).collect(),
            start_position: v3(f.start.position),
            start_yaw: f.start.yaw_deg.to_radians(),
            goal: v3(f.goal),
            flight_height: f.flight_height,
            arena: f.arena.map(|b| Aabb::new(v3(b.min), v3(b.max))),
        };
        if scene.arena.is_none() {
            scene.arena = Some(scene.bounds().inflate(1.0));
        }
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> Result<String> {
        let f = SceneFile {
            name: Some(self.name.clone()),
            boxes: self
                .boxes
                .iter()
                .map(|b| BoxFile { min: arr(&b.min), max: arr(&b.max) })
                .collect(),
            start: StartFile {
                position: arr(&self.start_position),
                yaw_deg: self.start_yaw.to_degrees(),
            },
            goal: arr(&self.goal),
            flight_height: self.flight_height,
            arena: self.arena.map(|b| BoxFile { min: arr(&b.min), max: arr(&b.max) }),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Nearest ray entry over all boxes.
    pub fn ray_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        self.boxes
            .iter()
            .filter_map(|b| b.ray_entry(origin, dir))
            .fold(None, |best: Option<f64>, t| Some(best.map_or(t, |b| b.min(t))))
    }

    /// Closest distance from `p` to any box.
    pub fn distance(&self, p: &Vec3) -> f64 {
        self.boxes.iter().map(|b| b.distance(p)).fold(f64::INFINITY, f64::min)
    }
}

/// Z-depth image of the scene seen from `camera_pose` (optical frame).
/// Pixels with no hit, or a hit deeper than `max_range`, are 0.
pub fn raycast_depth(scene: &Scene, camera_pose: &Pose, intr: &Intrinsics, max_range: f64) -> DepthImage {
    let origin = camera_pose.translation();
    let rot = camera_pose.rotation_matrix();
    let mut data = vec![0.0; intr.pixel_count()];
    data.par_chunks_mut(intr.width).enumerate().for_each(|(v, row)| {
        for (u, px) in row.iter_mut().enumerate() {
            // optical ray with unit z, so the ray parameter is the z-depth
            let dir = rot * intr.ray(u as f64, v as f64);
            if let Some(t) = scene.ray_hit(&origin, &dir) {
                if t <= max_range {
                    *px = t;
                }
            }
        }
    });
    DepthImage::from_vec(*intr, data).expect("buffer sized from intrinsics")
}

/// True when a sphere of `radius` at `position` touches a box (closed
/// contact) or its center leaves the arena.
pub fn check_collision(scene: &Scene, position: &Vec3, radius: f64) -> bool {
    if let Some(a) = &scene.arena {
        if !a.contains(position) {
            return true;
        }
    }
    scene.boxes.iter().any(|b| b.distance(position) <= radius)
}

const WALL_HEIGHT: f64 = 2.0;
const WALL_THICKNESS: f64 = 0.2;
const FLIGHT_HEIGHT: f64 = 0.4;
const HALF_WIDTH: f64 = 1.25;

/// Wall segment in plan view, floor to `WALL_HEIGHT`.
fn wall(x0: f64, y0: f64, x1: f64, y1: f64) -> Aabb {
    Aabb::new(
        Vec3::new(x0.min(x1), y0.min(y1), 0.0),
        Vec3::new(x0.max(x1), y0.max(y1), WALL_HEIGHT),
    )
}

fn column(x: f64, y: f64, side: f64) -> Aabb {
    let h = side / 2.0;
    wall(x - h, y - h, x + h, y + h)
}

fn start() -> Vec3 {
    Vec3::new(-1.5, 0.0, FLIGHT_HEIGHT)
}

/// Names accepted by [`builtin`].
pub const BUILTIN_SCENES: [&str; 5] = [
    "straight_hall",
    "l_corner_left",
    "l_corner_right",
    "t_intersection",
    "open_room_columns",
];

/// Scenes whose goal the default library can reach.
pub const REACHABLE_SCENES: [&str; 4] = [
    "straight_hall",
    "l_corner_left",
    "l_corner_right",
    "open_room_columns",
];

pub fn builtin(name: &str) -> Option<Scene> {
    let (w, t) = (HALF_WIDTH, WALL_THICKNESS);
    let scene = match name {
        // 2.5 m wide, goal 8 m ahead of the start
        "straight_hall" => Scene::new(
            name,
            vec![wall(-4.0, w, 10.0, w + t), wall(-4.0, -w - t, 10.0, -w)],
            start(),
            0.0,
            Vec3::new(6.5, 0.0, FLIGHT_HEIGHT),
            FLIGHT_HEIGHT,
        ),
        // long approach, goal 0.75 m past the corridor wall line inside a
        // 3 m wide branch; hidden from the start by the inner wall
        "l_corner_left" | "l_corner_right" => {
            let s = if name == "l_corner_left" { 1.0 } else { -1.0 };
            let (inner, outer) = (12.0, 15.0);
            let boxes = vec![
                // inside of the turn
                wall(-4.0, s * w, inner, s * (w + t)),
                wall(inner - t, s * w, inner, s * 9.0),
                // outside of the turn
                wall(-4.0, -s * w, outer + t, -s * (w + t)),
                wall(outer, -s * (w + t), outer + t, s * 9.0),
            ];
            Scene::new(
                name,
                boxes,
                start(),
                0.0,
                Vec3::new((inner + outer) / 2.0, s * (w + 0.75), FLIGHT_HEIGHT),
                FLIGHT_HEIGHT,
            )
        }
        // goal behind the far wall, side branches closed
        "t_intersection" => {
            let (stem_end, top, branch) = (5.0, 7.5, 4.0);
            let boxes = vec![
                wall(-4.0, w, stem_end, w + t),
                wall(-4.0, -w - t, stem_end, -w),
                wall(stem_end - t, w, stem_end, branch),
                wall(stem_end - t, -branch, stem_end, -w),
                wall(top, -branch - t, top + t, branch + t),
                wall(stem_end - t, branch, top, branch + t),
                wall(stem_end - t, -branch - t, top, -branch),
            ];
            Scene::new(name, boxes, start(), 0.0, Vec3::new(10.0, 0.0, FLIGHT_HEIGHT), FLIGHT_HEIGHT)
        }
        "open_room_columns" => {
            let (x0, x1, y) = (-3.0, 10.0, 4.0);
            let boxes = vec![
                wall(x0 - t, -y - t, x0, y + t),
                wall(x1, -y - t, x1 + t, y + t),
                wall(x0, y, x1, y + t),
                wall(x0, -y - t, x1, -y),
                column(2.0, 1.2, 0.4),
                column(3.5, -1.0, 0.4),
                column(5.5, 1.8, 0.4),
                column(6.5, -2.2, 0.4),
            ];
            Scene::new(name, boxes, start(), 0.0, Vec3::new(8.5, 0.5, FLIGHT_HEIGHT), FLIGHT_HEIGHT)
        }
        _ => return None,
    };
    Some(scene.expect("bundled scenes are valid"))
}

/// All bundled scenes, in [`BUILTIN_SCENES`] order.
pub fn bundled() -> Vec<Scene> {
    BUILTIN_SCENES.iter().map(|n| builtin(n).expect("known name")).collect()
}
