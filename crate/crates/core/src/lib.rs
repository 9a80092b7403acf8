//! SculptDiff: goal-conditioned point-cloud diffusion policy for sequential
//! clay sculpting, with a kinematic particle clay simulator standing in for
//! the robot cell.

pub mod baselines;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod pointcloud;
pub mod policy;
pub mod sim;

pub use config::Config;
pub use error::{Error, Result};
pub use pointcloud::{PointCloud, StageFrame};
