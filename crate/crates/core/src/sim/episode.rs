//! Closed-loop episode: render, perturb, fuse, plan, fly.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scene::{check_collision, raycast_depth, Scene};
use crate::camera::DepthImage;
use crate::config::RunConfig;
use crate::error::Result;
use crate::geometry::{camera_pose_from_body, Pose, Vec3};
use crate::planner::{horizontal_distance, PlanQuery, PlanResult, Planner};
use crate::primitives::PrimitiveLibrary;
use crate::tsdf::{FrameHistory, VoxelBlockGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    GoalReached,
    SelfStopped,
    Collided,
    StepLimit,
}

impl Outcome {
    pub fn as_str(&self) -> &'static str {
        match self {
            Outcome::GoalReached => "GoalReached",
            Outcome::SelfStopped => "SelfStopped",
            Outcome::Collided => "Collided",
            Outcome::StepLimit => "StepLimit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Warmup,
    Start,
    Primitive(usize),
    Stop,
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Action::Warmup => f.write_str("warmup"),
            Action::Start => f.write_str("start"),
            Action::Primitive(i) => write!(f, "p{i}"),
            Action::Stop => f.write_str("stop"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    None,
    Replan,
    Goal,
    Stop,
    Collision,
    StepLimit,
}

impl Event {
    fn as_str(&self) -> &'static str {
        match self {
            Event::None => "",
            Event::Replan => "replan",
            Event::Goal => "goal",
            Event::Stop => "stop",
            Event::Collision => "collision",
            Event::StepLimit => "limit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Seconds; warm-up frames are logged at negative times.
    pub t: f64,
    pub position: Vec3,
    pub yaw: f64,
    pub action: Action,
    pub event: Event,
    /// Occupied voxel count at the latest planner call.
    pub occupied: usize,
    pub blocks: usize,
}

/// Inputs of the latest planner call, enough to rerun it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySnapshot {
    pub pose: Pose,
    pub goal: Vec3,
    pub obstacles: Vec<Vec3>,
    pub clearance: f64,
    pub flight_height: f64,
}

impl QuerySnapshot {
    pub fn query(&self) -> PlanQuery<'_> {
        PlanQuery {
            pose: self.pose,
            goal: self.goal,
            obstacles: &self.obstacles,
            clearance: self.clearance,
            flight_height: self.flight_height,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub scene: String,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    pub outcome: Outcome,
    pub start: Vec3,
    pub end: Vec3,
    pub goal: Vec3,
    pub replans: usize,
    pub last_query: Option<QuerySnapshot>,
}

/// `1 - |end - goal| / |start - goal|`, unclamped.
pub fn goal_completion(start: &Vec3, end: &Vec3, goal: &Vec3) -> f64 {
    1.0 - (end - goal).norm() / (start - goal).norm()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub scene: String,
    pub seed: u64,
    pub outcome: Outcome,
    pub collided: bool,
    /// Clamped to [0, 1].
    pub goal_completion: f64,
    pub goal_completion_raw: f64,
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub goal: [f64; 3],
    pub duration: f64,
    pub replans: usize,
    pub final_occupied: usize,
}

impl RunLog {
    pub fn collided(&self) -> bool {
        self.outcome == Outcome::Collided
    }

    pub fn completion_raw(&self) -> f64 {
        goal_completion(&self.start, &self.end, &self.goal)
    }

    pub fn completion(&self) -> f64 {
        self.completion_raw().clamp(0.0, 1.0)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,x,y,z,yaw,action,event\n");
        for r in &self.records {
            let p = r.position;
            let _ = writeln!(s, "{},{},{},{},{},{},{}", r.t, p.x, p.y, p.z, r.yaw, r.action, r.event.as_str());
        }
        s
    }

    pub fn summary(&self) -> EpisodeSummary {
        let a = |v: &Vec3| [v.x, v.y, v.z];
        EpisodeSummary {
            scene: self.scene.clone(),
            seed: self.seed,
            outcome: self.outcome,
            collided: self.collided(),
            goal_completion: self.completion(),
            goal_completion_raw: self.completion_raw(),
            start: a(&self.start),
            end: a(&self.end),
            goal: a(&self.goal),
            duration: self.records.last().map_or(0.0, |r| r.t.max(0.0)),
            replans: self.replans,
            final_occupied: self.records.last().map_or(0, |r| r.occupied),
        }
    }
}

/// Depth sensor plus fusion front end: noise, pose error, latency and the
/// optional sliding window.
struct Perception<'a> {
    cfg: &'a RunConfig,
    scene: &'a Scene,
    grid: VoxelBlockGrid,
    pending: VecDeque<(DepthImage, Pose)>,
    history: Option<FrameHistory>,
    frame: u64,
}

impl<'a> Perception<'a> {
    fn new(scene: &'a Scene, cfg: &'a RunConfig) -> Result<Self> {
        Ok(Self {
            cfg,
            scene,
            grid: VoxelBlockGrid::new(cfg.tsdf)?,
            pending: VecDeque::new(),
            history: cfg.sim.fusion_window.map(|k| FrameHistory::new(Some(k))),
            frame: 0,
        })
    }

    fn observe(&mut self, body: &Pose) -> Result<()> {
        let cam = camera_pose_from_body(body);
        let clean = raycast_depth(self.scene, &cam, &self.cfg.camera, self.cfg.sim.max_range);
        let img = self.cfg.noise.apply(&clean, self.frame);
        let believed = self.odometry(body);
        self.pending.push_back((img, camera_pose_from_body(&believed)));
        self.frame += 1;
        if self.pending.len() > self.cfg.sim.frame_delay {
            let (img, pose) = self.pending.pop_front().expect("non-empty");
            match (&mut self.history, self.cfg.sim.fusion_window) {
                (Some(h), Some(k)) => {
                    h.push(img, pose);
                    self.grid.reset_window(h, k)?;
                }
                _ => {
                    self.grid.integrate(&img, &pose);
                }
            }
        }
        Ok(())
    }

    fn odometry(&self, body: &Pose) -> Pose {
        let sigma = self.cfg.sim.odometry_sigma;
        if sigma == 0.0 {
            return *body;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.noise.seed);
        rng.set_stream(ODOMETRY_STREAM | self.frame);
        let mut e = Vec3::zeros();
        for i in 0..3 {
            e[i] = sigma * rng.sample::<f64, _>(StandardNormal);
        }
        Pose::new(body.rotation(), body.translation() + e)
    }
}

const ODOMETRY_STREAM: u64 = 1 << 63;

/// Runs one episode; the noise seed in `cfg` keys every random draw.
pub fn run_episode(scene: &Scene, cfg: &RunConfig) -> Result<RunLog> {
    run_episode_with_map(scene, cfg).map(|(log, _)| log)
}

/// Like [`run_episode`], also returning the final map.
pub fn run_episode_with_map(scene: &Scene, cfg: &RunConfig) -> Result<(RunLog, VoxelBlockGrid)> {
    cfg.validate()?;
    scene.validate()?;
    let lib = PrimitiveLibrary::generate(cfg.library)?;
    let planner = Planner::new(cfg.planner.index_threshold);
    let mut eye = Perception::new(scene, cfg)?;

    let dt = cfg.sim.sensor_period;
    let every = cfg.sim.replan_every();
    let speed = cfg.library.speed;
    let h = scene.flight_height;
    let radius = cfg.sim.robot_radius;
    let goal_r = cfg.planner.goal_radius;
    let goal = scene.goal;
    let x0 = Vec3::new(scene.start_position.x, scene.start_position.y, h);
    let yaw0 = scene.start_yaw;

    let mut log = RunLog {
        scene: scene.name.clone(),
        seed: cfg.noise.seed,
        records: Vec::new(),
        outcome: Outcome::StepLimit,
        start: x0,
        end: x0,
        goal,
        replans: 0,
        last_query: None,
    };
    let rec = |log: &mut RunLog, t: f64, pose: &Pose, action, event, occupied, blocks| {
        log.records.push(StepRecord {
            t,
            position: pose.translation(),
            yaw: pose.yaw(),
            action,
            event,
            occupied,
            blocks,
        });
        log.end = pose.translation();
    };

    // Warm-up: fly straight into the start pose, fusing without planning.
    let heading = Vec3::new(yaw0.cos(), yaw0.sin(), 0.0);
    let warm = cfg.sim.warm_start_frames;
    for k in 0..warm {
        let back = (warm - k) as f64;
        let pose = Pose::from_position_yaw(x0 - heading * (back * speed * dt), yaw0);
        if check_collision(scene, &pose.translation(), radius) {
            rec(&mut log, -back * dt, &pose, Action::Warmup, Event::Collision, 0, eye.grid.block_count());
            log.outcome = Outcome::Collided;
            return Ok((log, eye.grid));
        }
        eye.observe(&pose)?;
        rec(&mut log, -back * dt, &pose, Action::Warmup, Event::None, 0, eye.grid.block_count());
    }

    let mut pose = Pose::from_position_yaw(x0, yaw0);
    let mut occupied = 0;
    if check_collision(scene, &x0, radius) {
        rec(&mut log, 0.0, &pose, Action::Start, Event::Collision, 0, eye.grid.block_count());
        log.outcome = Outcome::Collided;
        return Ok((log, eye.grid));
    }
    if horizontal_distance(&x0, &goal) <= goal_r {
        rec(&mut log, 0.0, &pose, Action::Start, Event::Goal, 0, eye.grid.block_count());
        log.outcome = Outcome::GoalReached;
        return Ok((log, eye.grid));
    }
    rec(&mut log, 0.0, &pose, Action::Start, Event::None, 0, eye.grid.block_count());

    // (origin pose, primitive index, time flown along it)
    let mut active: Option<(Pose, usize, f64)> = None;
    for step in 0..cfg.sim.max_steps {
        let t0 = step as f64 * dt;
        eye.observe(&pose)?;
        let mut event = Event::None;
        if step % every == 0 {
            let obstacles = eye.grid.extract_occupied(&cfg.occupancy);
            occupied = obstacles.len();
            let snapshot = QuerySnapshot {
                pose,
                goal,
                obstacles,
                clearance: cfg.planner.clearance,
                flight_height: h,
            };
            let result = planner.select(&lib, &snapshot.query());
            log.last_query = Some(snapshot);
            log.replans += 1;
            match result {
                PlanResult::Stop(_) => {
                    rec(&mut log, t0, &pose, Action::Stop, Event::Stop, occupied, eye.grid.block_count());
                    log.outcome = Outcome::SelfStopped;
                    return Ok((log, eye.grid));
                }
                PlanResult::Selected(s) => {
                    active = Some((pose, s.index, 0.0));
                    event = Event::Replan;
                }
            }
        }
        let (origin, index, flown) = active.expect("planned on step 0");
        let prim = &lib.primitives[index];
        let sub = (dt / prim.spec.dt()).ceil().max(1.0) as usize;
        let mut prev = pose.translation();
        let mut terminal = None;
        for j in 1..=sub {
            let frac = j as f64 / sub as f64;
            let (p, dyaw) = prim.state_at(flown + dt * frac);
            let mut w = origin.transform_point(&p);
            w.z = h;
            let next = Pose::from_position_yaw(w, origin.yaw() + dyaw);
            if check_collision(scene, &w, radius) {
                pose = next;
                terminal = Some((t0 + dt * frac, Event::Collision, Outcome::Collided));
                break;
            }
            if horizontal_distance(&w, &goal) <= goal_r {
                let s = boundary_crossing(&prev, &w, &goal, goal_r);
                let at = prev + (w - prev) * s;
                pose = Pose::from_position_yaw(at, next.yaw());
                let t = t0 + dt * ((j - 1) as f64 + s) / sub as f64;
                terminal = Some((t, Event::Goal, Outcome::GoalReached));
                break;
            }
            prev = w;
            pose = next;
        }
        active = Some((origin, index, flown + dt));
        if let Some((t, ev, outcome)) = terminal {
            rec(&mut log, t, &pose, Action::Primitive(index), ev, occupied, eye.grid.block_count());
            log.outcome = outcome;
            return Ok((log, eye.grid));
        }
        let ev = if step + 1 == cfg.sim.max_steps { Event::StepLimit } else { event };
        rec(&mut log, t0 + dt, &pose, Action::Primitive(index), ev, occupied, eye.grid.block_count());
    }
    log.outcome = Outcome::StepLimit;
    Ok((log, eye.grid))
}

/// Fraction along `a -> b` where the horizontal distance to `goal` first
/// drops to `r`. Assumes `a` is outside and `b` inside.
fn boundary_crossing(a: &Vec3, b: &Vec3, goal: &Vec3, r: f64) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let (ex, ey) = (a.x - goal.x, a.y - goal.y);
    let qa = dx * dx + dy * dy;
    if qa == 0.0 {
        return 1.0;
    }
    let qb = 2.0 * (dx * ex + dy * ey);
    let qc = ex * ex + ey * ey - r * r;
    let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
    ((-qb - disc.sqrt()) / (2.0 * qa)).clamp(0.0, 1.0)
}
