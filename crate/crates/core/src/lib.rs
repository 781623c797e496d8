//! Monocular MAV navigation stack: TSDF mapping from depth and pose streams,
//! motion-primitive planning under a clearance constraint, depth-evaluation
//! metrics, and a deterministic closed-loop simulator built on ray-cast
//! depth with a configurable noise model.

pub mod camera;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod planner;
pub mod primitives;
pub mod sim;
pub mod spatial;
pub mod tsdf;

pub use camera::{DepthImage, Intrinsics, PointCloud};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use geometry::{Pose, Vec3};
pub use planner::{PlanQuery, PlanResult, Planner};
pub use primitives::{LibraryParams, Primitive, PrimitiveLibrary};
pub use tsdf::{OccupancyFilter, TsdfParams, VoxelBlockGrid};
