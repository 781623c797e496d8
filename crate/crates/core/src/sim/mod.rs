//! Deterministic closed-loop simulator over axis-aligned box worlds.

pub mod batch;
pub mod episode;
pub mod noise;
pub mod scene;

pub use batch::{batch_evaluate, batch_run, episode_seed, BatchSummary, GroupStats};
pub use episode::{goal_completion, run_episode, run_episode_with_map, Outcome, RunLog, StepRecord};
pub use noise::{calibrate, Knob, NoiseModel};
pub use scene::{builtin, bundled, check_collision, raycast_depth, Aabb, Scene, BUILTIN_SCENES, REACHABLE_SCENES};
