//! LiDAR-inertial odometry built from an iterated error-state Kalman filter on
//! SO(3) × R¹⁵ and a probabilistic voxel map of planes, plus a deterministic
//! simulator that supplies ground truth for every part of the pipeline.

pub mod association;
pub mod config;
pub mod error;
pub mod ieskf;
pub mod io;
pub mod kinematics;
pub mod manifold;
pub mod pipeline;
pub mod propagation;
pub mod sim;
pub mod uncertainty;
pub mod verify;
pub mod voxel_map;

pub use error::{Error, Result};

/// Standard gravity magnitude, m/s².
pub const GRAVITY: f64 = 9.81;
