//! Run configuration: every tunable flattened into one `section.key = value` document.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::ieskf::{FilterConfig, GainMode, PriorJacobianMode};
use crate::kinematics::{Extrinsic, ImuNoiseDensity, Pose};
use crate::manifold::{Rotation, Vec3};
use crate::propagation::JacobianMode;
use crate::sim::{LidarSpec, NoiseSpec, SyntheticWorld, TrajectoryKind, TrajectorySpec};
use crate::voxel_map::VoxelMapConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrajectoryName {
    Rest,
    ConstantVelocity,
    Circular,
    #[default]
    FigureEight,
    Spin,
}

/// Deliberate faults for the verification suite's negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Corruption {
    #[default]
    None,
    /// Perturbs the analytic transition Jacobian.
    Transition,
    /// Perturbs the analytic plane-normal Jacobian.
    PlaneNormal,
    /// Perturbs the analytic observation row.
    Observation,
    /// Perturbs the analytic prior projection Jacobian.
    PriorJacobian,
    /// Perturbs the efficient Kalman gain.
    Gain,
    /// Perturbs the continuous-time transition Jacobian.
    MethodEquivalence,
    /// Scales the analytic point covariance.
    Covariance,
}

/// Sensor noise the filter assumes for LiDAR returns.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarNoise {
    pub range_std: f64,
    pub bearing_std: f64,
}

/// Per-run settings that do not belong to a single module.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    /// Leading IMU span averaged to initialize gravity and the gyro bias, s.
    pub init_time: f64,
    /// Share of scans allowed to end without matches before the run fails.
    pub failure_ratio: f64,
    /// Returns closer than this are discarded, m.
    pub min_range: f64,
    /// Keep every n-th return (1 keeps all).
    pub point_stride: usize,
    pub init_attitude_std: f64,
    pub init_position_std: f64,
    pub init_velocity_std: f64,
    pub init_gyro_bias_std: f64,
    pub init_acc_bias_std: f64,
    pub init_gravity_std: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            init_time: 0.5,
            failure_ratio: 0.2,
            min_range: 0.3,
            point_stride: 1,
            init_attitude_std: 1e-3,
            init_position_std: 1e-4,
            init_velocity_std: 1e-2,
            init_gyro_bias_std: 1e-3,
            init_acc_bias_std: 1e-2,
            init_gravity_std: 1e-2,
        }
    }
}

/// Simulator scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub trajectory: TrajectoryName,
    pub duration: f64,
    pub imu_rate: f64,
    pub scan_rate: f64,
    pub points_per_scan: usize,
    pub rest_time: f64,
    pub ramp_time: f64,
    pub velocity: Vec3,
    pub radius: f64,
    /// Angular rate of circle, figure-eight and spin paths, rad/s.
    pub rate: f64,
    /// Figure-eight half-extents.
    pub extent: Vec3,
    pub channels: usize,
    /// Half vertical field of view, degrees.
    pub half_fov_deg: f64,
    pub max_range: f64,
    pub phase_drift: bool,
    pub room_min: Vec3,
    pub room_max: Vec3,
    pub noise: NoiseSpec,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            trajectory: TrajectoryName::FigureEight,
            duration: 30.0,
            imu_rate: 200.0,
            scan_rate: 10.0,
            points_per_scan: 2000,
            rest_time: 1.0,
            ramp_time: 2.0,
            velocity: Vec3::new(0.3, 0.1, 0.0),
            radius: 1.5,
            rate: 0.5,
            extent: Vec3::new(1.5, 1.0, 0.2),
            channels: 16,
            half_fov_deg: 35.0,
            max_range: 60.0,
            phase_drift: true,
            room_min: Vec3::new(-3.3, -2.7, -1.3),
            room_max: Vec3::new(3.6, 3.2, 1.9),
            noise: NoiseSpec::default(),
        }
    }
}

impl SimConfig {
    pub fn trajectory_spec(&self) -> TrajectorySpec {
        let kind = match self.trajectory {
            TrajectoryName::Rest => TrajectoryKind::Rest,
            TrajectoryName::ConstantVelocity => TrajectoryKind::ConstantVelocity { velocity: self.velocity },
            TrajectoryName::Circular => TrajectoryKind::Circular { radius: self.radius, rate: self.rate },
            TrajectoryName::FigureEight => {
                TrajectoryKind::FigureEight { ax: self.extent.x, ay: self.extent.y, az: self.extent.z, rate: self.rate }
            }
            TrajectoryName::Spin => TrajectoryKind::Spin { rate: self.rate },
        };
        TrajectorySpec {
            kind,
            duration: self.duration,
            imu_rate: self.imu_rate,
            scan_rate: self.scan_rate,
            points_per_scan: self.points_per_scan,
            rest_time: self.rest_time,
            ramp_time: self.ramp_time,
        }
    }

    pub fn lidar_spec(&self, extrinsic: &Extrinsic, min_range: f64) -> LidarSpec {
        LidarSpec {
            channels: self.channels,
            half_fov: self.half_fov_deg.to_radians(),
            min_range,
            max_range: self.max_range,
            extrinsic: *extrinsic,
            phase_drift: self.phase_drift,
        }
    }

    pub fn world(&self) -> SyntheticWorld {
        SyntheticWorld::room(self.room_min, self.room_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VerifyConfig {
    pub seed: u64,
    pub corrupt: Corruption,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub map: VoxelMapConfig,
    pub filter: FilterConfig,
    pub jacobian_mode: JacobianMode,
    pub imu_noise: ImuNoiseDensity,
    pub lidar_noise: LidarNoise,
    pub extrinsic: Extrinsic,
    pub pipeline: PipelineConfig,
    pub sim: SimConfig,
    pub verify: VerifyConfig,
    pub imu_path: Option<PathBuf>,
    pub scan_path: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            map: VoxelMapConfig::default(),
            filter: FilterConfig::default(),
            jacobian_mode: JacobianMode::Approximate,
            imu_noise: ImuNoiseDensity::default(),
            lidar_noise: LidarNoise { range_std: 0.02, bearing_std: 0.001 },
            extrinsic: Pose::new(Rotation::identity(), Vec3::new(0.04, 0.0, 0.08)),
            pipeline: PipelineConfig::default(),
            sim: SimConfig::default(),
            verify: VerifyConfig { seed: 1, corrupt: Corruption::None },
            imu_path: None,
            scan_path: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

enum Field<'a> {
    F64(&'a mut f64),
    Usize(&'a mut usize),
    U8(&'a mut u8),
    U64(&'a mut u64),
    Bool(&'a mut bool),
    Vec3(&'a mut Vec3),
    Quat(&'a mut Rotation),
    OptPath(&'a mut Option<PathBuf>),
    Path(&'a mut PathBuf),
    Gain(&'a mut GainMode),
    Prior(&'a mut PriorJacobianMode),
    Jacobian(&'a mut JacobianMode),
    Trajectory(&'a mut TrajectoryName),
    Corrupt(&'a mut Corruption),
}

const GAIN: [(&str, GainMode); 2] = [("efficient", GainMode::Efficient), ("naive", GainMode::Naive)];
const PRIOR: [(&str, PriorJacobianMode); 2] =
    [("full", PriorJacobianMode::Full), ("identity", PriorJacobianMode::Identity)];
const JACOBIAN: [(&str, JacobianMode); 2] =
    [("approximate", JacobianMode::Approximate), ("exact", JacobianMode::Exact)];
const TRAJECTORY: [(&str, TrajectoryName); 5] = [
    ("rest", TrajectoryName::Rest),
    ("constant_velocity", TrajectoryName::ConstantVelocity),
    ("circular", TrajectoryName::Circular),
    ("figure_eight", TrajectoryName::FigureEight),
    ("spin", TrajectoryName::Spin),
];
const CORRUPT: [(&str, Corruption); 8] = [
    ("none", Corruption::None),
    ("transition", Corruption::Transition),
    ("plane_normal", Corruption::PlaneNormal),
    ("observation", Corruption::Observation),
    ("prior_jacobian", Corruption::PriorJacobian),
    ("gain", Corruption::Gain),
    ("method_equivalence", Corruption::MethodEquivalence),
    ("covariance", Corruption::Covariance),
];

fn choose<T: Copy>(table: &[(&str, T)], value: &str) -> std::result::Result<T, String> {
    table.iter().find(|(n, _)| *n == value).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = table.iter().map(|(n, _)| *n).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn name_of<T: Copy + PartialEq>(table: &[(&str, T)], v: T) -> String {
    table.iter().find(|(_, x)| *x == v).map(|(n, _)| n.to_string()).unwrap_or_default()
}

fn parse_floats(value: &str, n: usize) -> std::result::Result<Vec<f64>, String> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != n {
        return Err(format!("expected {n} numbers"));
    }
    parts
        .iter()
        .map(|p| p.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| format!("invalid number '{p}'")))
        .collect()
}

impl Field<'_> {
    fn set(self, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse::<T>().map_err(|_| format!("invalid value '{v}'"))
        }
        match self {
            Field::F64(f) => {
                *f = num::<f64>(value)?;
                if !f.is_finite() {
                    return Err(format!("non-finite value '{value}'"));
                }
            }
            Field::Usize(f) => *f = num(value)?,
            Field::U8(f) => *f = num(value)?,
            Field::U64(f) => *f = num(value)?,
            Field::Bool(f) => *f = num(value)?,
            Field::Vec3(f) => {
                let v = parse_floats(value, 3)?;
                *f = Vec3::new(v[0], v[1], v[2]);
            }
            Field::Quat(f) => {
                let q = parse_floats(value, 4)?;
                let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(format!("quaternion norm {norm} is not 1"));
                }
                *f = Rotation::from_quaternion(q[0], q[1], q[2], q[3]);
            }
            Field::OptPath(f) => *f = (!value.is_empty()).then(|| PathBuf::from(value)),
            Field::Path(f) => *f = PathBuf::from(value),
            Field::Gain(f) => *f = choose(&GAIN, value)?,
            Field::Prior(f) => *f = choose(&PRIOR, value)?,
            Field::Jacobian(f) => *f = choose(&JACOBIAN, value)?,
            Field::Trajectory(f) => *f = choose(&TRAJECTORY, value)?,
            Field::Corrupt(f) => *f = choose(&CORRUPT, value)?,
        }
        Ok(())
    }

    fn get(self) -> String {
        let n = crate::io::num;
        match self {
            Field::F64(f) => n(*f),
            Field::Usize(f) => f.to_string(),
            Field::U8(f) => f.to_string(),
            Field::U64(f) => f.to_string(),
            Field::Bool(f) => f.to_string(),
            Field::Vec3(f) => format!("{} {} {}", n(f.x), n(f.y), n(f.z)),
            Field::Quat(f) => f.to_quaternion().iter().map(|v| n(*v)).collect::<Vec<_>>().join(" "),
            Field::OptPath(f) => f.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            Field::Path(f) => f.display().to_string(),
            Field::Gain(f) => name_of(&GAIN, *f),
            Field::Prior(f) => name_of(&PRIOR, *f),
            Field::Jacobian(f) => name_of(&JACOBIAN, *f),
            Field::Trajectory(f) => name_of(&TRAJECTORY, *f),
            Field::Corrupt(f) => name_of(&CORRUPT, *f),
        }
    }
}

impl RunConfig {
    fn fields(&mut self) -> Vec<(&'static str, Field<'_>)> {
        use Field::*;
        let m = &mut self.map;
        let f = &mut self.filter;
        let p = &mut self.pipeline;
        let s = &mut self.sim;
        vec![
            ("map.root_size", F64(&mut m.root_size)),
            ("map.max_depth", U8(&mut m.max_depth)),
            ("map.min_points", Usize(&mut m.min_points)),
            ("map.max_buffer_points", Usize(&mut m.max_buffer_points)),
            ("map.plane_converged_trace", F64(&mut m.plane_converged_trace)),
            ("map.normal_change_thresh", F64(&mut m.normal_change_thresh)),
            ("map.update_batch", Usize(&mut m.update_batch)),
            ("map.search_neighbors", Bool(&mut m.search_neighbors)),
            ("map.max_plane_points", Usize(&mut m.max_plane_points)),
            ("map.plane_rms", F64(&mut m.plane.plane_rms)),
            ("map.thickness_ratio", F64(&mut m.plane.thickness_ratio)),
            ("map.gap_floor", F64(&mut m.plane.gap_floor)),
            ("map.support_ratio", F64(&mut m.plane.support_ratio)),
            ("map.noise_ratio", F64(&mut m.plane.noise_ratio)),
            ("map.min_incidence_cos", F64(&mut m.plane.min_incidence_cos)),
            ("filter.max_iterations", Usize(&mut f.max_iterations)),
            ("filter.eps_rot", F64(&mut f.eps_rot)),
            ("filter.eps_trans", F64(&mut f.eps_trans)),
            ("filter.gain", Gain(&mut f.gain)),
            ("filter.requery", Bool(&mut f.requery)),
            ("filter.prior_jacobian", Prior(&mut f.prior_jacobian)),
            ("filter.jacobian_mode", Jacobian(&mut self.jacobian_mode)),
            ("imu.gyro_noise", F64(&mut self.imu_noise.gyro)),
            ("imu.acc_noise", F64(&mut self.imu_noise.acc)),
            ("imu.gyro_walk", F64(&mut self.imu_noise.gyro_walk)),
            ("imu.acc_walk", F64(&mut self.imu_noise.acc_walk)),
            ("lidar.range_std", F64(&mut self.lidar_noise.range_std)),
            ("lidar.bearing_std", F64(&mut self.lidar_noise.bearing_std)),
            ("extrinsic.translation", Vec3(&mut self.extrinsic.trans)),
            ("extrinsic.rotation", Quat(&mut self.extrinsic.rot)),
            ("pipeline.init_time", F64(&mut p.init_time)),
            ("pipeline.failure_ratio", F64(&mut p.failure_ratio)),
            ("pipeline.min_range", F64(&mut p.min_range)),
            ("pipeline.point_stride", Usize(&mut p.point_stride)),
            ("pipeline.init_attitude_std", F64(&mut p.init_attitude_std)),
            ("pipeline.init_position_std", F64(&mut p.init_position_std)),
            ("pipeline.init_velocity_std", F64(&mut p.init_velocity_std)),
            ("pipeline.init_gyro_bias_std", F64(&mut p.init_gyro_bias_std)),
            ("pipeline.init_acc_bias_std", F64(&mut p.init_acc_bias_std)),
            ("pipeline.init_gravity_std", F64(&mut p.init_gravity_std)),
            ("sim.trajectory", Trajectory(&mut s.trajectory)),
            ("sim.duration", F64(&mut s.duration)),
            ("sim.imu_rate", F64(&mut s.imu_rate)),
            ("sim.scan_rate", F64(&mut s.scan_rate)),
            ("sim.points_per_scan", Usize(&mut s.points_per_scan)),
            ("sim.rest_time", F64(&mut s.rest_time)),
            ("sim.ramp_time", F64(&mut s.ramp_time)),
            ("sim.velocity", Vec3(&mut s.velocity)),
            ("sim.radius", F64(&mut s.radius)),
            ("sim.rate", F64(&mut s.rate)),
            ("sim.extent", Vec3(&mut s.extent)),
            ("sim.channels", Usize(&mut s.channels)),
            ("sim.half_fov_deg", F64(&mut s.half_fov_deg)),
            ("sim.max_range", F64(&mut s.max_range)),
            ("sim.phase_drift", Bool(&mut s.phase_drift)),
            ("sim.room_min", Vec3(&mut s.room_min)),
            ("sim.room_max", Vec3(&mut s.room_max)),
            ("sim.range_std", F64(&mut s.noise.range_std)),
            ("sim.bearing_std", F64(&mut s.noise.bearing_std)),
            ("sim.gyro_noise", F64(&mut s.noise.imu.gyro)),
            ("sim.acc_noise", F64(&mut s.noise.imu.acc)),
            ("sim.gyro_walk", F64(&mut s.noise.imu.gyro_walk)),
            ("sim.acc_walk", F64(&mut s.noise.imu.acc_walk)),
            ("sim.seed", U64(&mut s.noise.seed)),
            ("verify.seed", U64(&mut self.verify.seed)),
            ("verify.corrupt", Corrupt(&mut self.verify.corrupt)),
            ("input.imu", OptPath(&mut self.imu_path)),
            ("input.scans", OptPath(&mut self.scan_path)),
            ("output.dir", Path(&mut self.output_dir)),
        ]
    }

    /// Every recognized key, in document order.
    pub fn keys() -> Vec<&'static str> {
        RunConfig::default().fields().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let field = self
            .fields()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, f)| f)
            .ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        field.set(value).map_err(|m| Error::Config(format!("{key}: {m}")))
    }

    /// Applies a `section.key = value` document on top of the current values.
    pub fn apply_document(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'section.key = value'", i + 1)))?;
            self.set(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config error: ")))
            })?;
        }
        Ok(())
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_document(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_document(&text)
    }

    /// The full effective configuration as a document that parses back to `self`.
    pub fn to_document(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        for (k, f) in copy.fields() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&f.get());
            out.push('\n');
        }
        out
    }

    // `!(x > 0.0)` is deliberate: it also rejects NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let m = &self.map;
        if !(m.root_size > 0.0)
            || m.max_depth == 0
            || m.min_points < 3
            || m.max_buffer_points < m.min_points
            || !(m.plane_converged_trace >= 0.0)
            || !(m.normal_change_thresh > 0.0)
            || m.update_batch == 0
            || m.max_plane_points < m.min_points
        {
            return bad("map settings must be positive, with min_points >= 3 and buffer/plane caps >= min_points");
        }
        if !(m.plane.plane_rms > 0.0
            && m.plane.thickness_ratio > 0.0
            && m.plane.gap_floor > 0.0
            && m.plane.support_ratio >= 0.0
            && m.plane.noise_ratio >= 0.0
            && (0.0..1.0).contains(&m.plane.min_incidence_cos))
        {
            return bad("plane thresholds must be positive");
        }
        let f = &self.filter;
        if f.max_iterations == 0 || !(f.eps_rot > 0.0) || !(f.eps_trans > 0.0) {
            return bad("filter iterations and thresholds must be positive");
        }
        let n = &self.imu_noise;
        if [n.gyro, n.acc, n.gyro_walk, n.acc_walk].iter().any(|v| !(*v > 0.0)) {
            return bad("filter IMU noise densities must be positive");
        }
        if !(self.lidar_noise.range_std > 0.0) || !(self.lidar_noise.bearing_std >= 0.0) {
            return bad("lidar range_std must be positive and bearing_std non-negative");
        }
        let p = &self.pipeline;
        let stds = [
            p.init_attitude_std,
            p.init_position_std,
            p.init_velocity_std,
            p.init_gyro_bias_std,
            p.init_acc_bias_std,
            p.init_gravity_std,
        ];
        if !(p.init_time >= 0.0)
            || !(0.0..=1.0).contains(&p.failure_ratio)
            || !(p.min_range >= 0.0)
            || p.point_stride == 0
            || stds.iter().any(|v| !(*v > 0.0))
        {
            return bad("pipeline settings out of range");
        }
        let s = &self.sim;
        s.trajectory_spec().validate()?;
        let sn = &s.noise;
        if [sn.range_std, sn.bearing_std, sn.imu.gyro, sn.imu.acc, sn.imu.gyro_walk, sn.imu.acc_walk]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return bad("simulator noise must be non-negative");
        }
        if s.channels == 0 || !(s.half_fov_deg >= 0.0 && s.half_fov_deg < 90.0) || !(s.max_range > p.min_range) {
            return bad("simulator LiDAR settings out of range");
        }
        if (0..3).any(|i| !(s.room_max[i] > s.room_min[i])) {
            return bad("sim.room_max must exceed sim.room_min on every axis");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let doc = cfg.to_document();
        assert_eq!(RunConfig::from_document(&doc).unwrap(), cfg);
        assert_eq!(doc.lines().count(), RunConfig::keys().len());
    }

    #[test]
    fn document_overrides() {
        let cfg = RunConfig::from_document(
            "# comment\n\nmap.max_depth = 2\nfilter.gain = naive   # trailing\nsim.trajectory = circular\nextrinsic.translation = 0.1 0 -0.2\nverify.corrupt = transition\n",
        )
        .unwrap();
        assert_eq!(cfg.map.max_depth, 2);
        assert_eq!(cfg.filter.gain, GainMode::Naive);
        assert_eq!(cfg.sim.trajectory, TrajectoryName::Circular);
        assert_eq!(cfg.extrinsic.trans, Vec3::new(0.1, 0.0, -0.2));
        assert_eq!(cfg.verify.corrupt, Corruption::Transition);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let e = RunConfig::from_document("map.root_sise = 1\n").unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("line 1") && m.contains("root_sise")));
        assert!(RunConfig::from_document("map.root_size 1\n").is_err());
        assert!(RunConfig::from_document("map.root_size = abc\n").is_err());
        assert!(RunConfig::from_document("filter.gain = fast\n").is_err());
        assert!(RunConfig::from_document("extrinsic.rotation = 0 0 0 2\n").is_err());
        assert!(RunConfig::from_document("map.root_size = -1\n").is_err());
        assert!(RunConfig::from_document("sim.duration = 0.1\n").is_err());
    }
}
