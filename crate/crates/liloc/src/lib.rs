//! Multi-session LiDAR-inertial lifelong localization.
//!
//! The engine estimates a 6-DoF trajectory for a subsidiary session inside
//! the coordinate frame of a prior (central) session by jointly optimizing
//! IMU preintegration, LiDAR odometry and fitness-weighted scan-match
//! factors over two coupled pose graphs, switching automatically between
//! relocalization (RLM) and incremental localization (ILM) based on how
//! much the current pose window overlaps the prior submaps.

pub mod config;
pub mod descriptor;
pub mod eval;
pub mod factorgraph;
pub mod geometry;
pub mod imu;
pub mod odometry;
pub mod pipeline;
pub mod pointcloud;
pub mod session;
pub mod simulator;

pub use config::RunConfig;
pub use geometry::{Pose, Rotation, Twist};
pub use pointcloud::{PointCloud, RegistrationResult};
