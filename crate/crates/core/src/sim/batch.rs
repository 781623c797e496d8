//! Many episodes, summarized per scene.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::episode::{run_episode, EpisodeSummary, Outcome, RunLog};
use super::scene::Scene;
use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Hardware reference: mean goal completion of the monocular stack over 15
/// real flights. Not reproducible in simulation.
pub const HARDWARE_GOAL_COMPLETION: f64 = 0.474;
/// Hardware reference collision rate over the same flights.
pub const HARDWARE_COLLISION_RATE: f64 = 0.13;

/// SplitMix64 finalizer, used to derive per-episode seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn episode_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub name: String,
    pub runs: usize,
    pub mean_goal_completion: f64,
    pub collision_rate: f64,
    pub goal_reached: usize,
    pub self_stopped: usize,
    pub collided: usize,
    pub step_limit: usize,
}

impl GroupStats {
    fn from_runs<'a>(name: &str, runs: impl Iterator<Item = &'a RunLog>) -> Self {
        let mut g = GroupStats {
            name: name.to_string(),
            runs: 0,
            mean_goal_completion: 0.0,
            collision_rate: 0.0,
            goal_reached: 0,
            self_stopped: 0,
            collided: 0,
            step_limit: 0,
        };
        let mut total = 0.0;
        for r in runs {
            g.runs += 1;
            total += r.completion();
            match r.outcome {
                Outcome::GoalReached => g.goal_reached += 1,
                Outcome::SelfStopped => g.self_stopped += 1,
                Outcome::Collided => g.collided += 1,
                Outcome::StepLimit => g.step_limit += 1,
            }
        }
        if g.runs > 0 {
            g.mean_goal_completion = total / g.runs as f64;
            g.collision_rate = g.collided as f64 / g.runs as f64;
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub per_scene: Vec<GroupStats>,
    pub overall: GroupStats,
    pub episodes: Vec<EpisodeSummary>,
    pub hardware_goal_completion: f64,
    pub hardware_collision_rate: f64,
}

impl BatchSummary {
    pub fn from_runs(runs: &[RunLog]) -> Self {
        let mut names: Vec<&str> = Vec::new();
        for r in runs {
            if !names.contains(&r.scene.as_str()) {
                names.push(&r.scene);
            }
        }
        let per_scene = names
            .iter()
            .map(|n| GroupStats::from_runs(n, runs.iter().filter(|r| r.scene == *n)))
            .collect();
        Self {
            per_scene,
            overall: GroupStats::from_runs("overall", runs.iter()),
            episodes: runs.iter().map(RunLog::summary).collect(),
            hardware_goal_completion: HARDWARE_GOAL_COMPLETION,
            hardware_collision_rate: HARDWARE_COLLISION_RATE,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<20}{:>6}{:>11}{:>11}{:>6}{:>6}{:>6}{:>6}\n",
            "scene", "runs", "% to goal", "coll.rate", "goal", "stop", "coll", "limit"
        );
        for g in self.per_scene.iter().chain(std::iter::once(&self.overall)) {
            s += &format!(
                "{:<20}{:>6}{:>10.1}%{:>11.2}{:>6}{:>6}{:>6}{:>6}\n",
                g.name,
                g.runs,
                100.0 * g.mean_goal_completion,
                g.collision_rate,
                g.goal_reached,
                g.self_stopped,
                g.collided,
                g.step_limit
            );
        }
        s += &format!(
            "{:<20}{:>6}{:>10.1}%{:>11.2}   (hardware flights, not a target)\n",
            "reference",
            15,
            100.0 * self.hardware_goal_completion,
            self.hardware_collision_rate
        );
        s
    }
}

/// Runs `trials` episodes per scene in parallel. Episode `i` (scene-major
/// order) uses noise seed `episode_seed(master_seed, i)`.
pub fn batch_run(scenes: &[Scene], cfg: &RunConfig, trials: usize, master_seed: u64) -> Result<Vec<RunLog>> {
    if trials == 0 {
        return Err(Error::config("trials", "must be >= 1"));
    }
    cfg.validate()?;
    let jobs: Vec<(usize, &Scene)> = scenes
        .iter()
        .flat_map(|s| std::iter::repeat_n(s, trials))
        .enumerate()
        .collect();
    jobs.par_iter()
        .map(|(i, scene)| {
            let mut c = *cfg;
            c.noise.seed = episode_seed(master_seed, *i as u64);
            run_episode(scene, &c)
        })
        .collect()
}

pub fn batch_evaluate(scenes: &[Scene], cfg: &RunConfig, trials: usize, master_seed: u64) -> Result<BatchSummary> {
    Ok(BatchSummary::from_runs(&batch_run(scenes, cfg, trials, master_seed)?))
}
