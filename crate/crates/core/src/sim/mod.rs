//! Synthetic worlds, trajectories and sensors with ground truth, plus the brute-force
//! oracles used to check analytic derivations.

pub mod ate;
pub mod oracles;
pub mod sensors;
pub mod trajectory;
pub mod world;

pub use ate::{evaluate_ate, interpolate_pose, AteReport};
pub use sensors::{generate_imu, generate_imu_record, generate_scan, GeneratedScan, ImuRecord, LidarSpec, NoiseSpec};
pub use trajectory::{KinematicSample, TrajectoryKind, TrajectorySpec};
pub use world::{Patch, SyntheticWorld};
