//! IMU and spinning-LiDAR synthesis from a ground-truth trajectory.

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::kinematics::{Extrinsic, ImuNoiseDensity, ImuSample, Pose};
use crate::manifold::{Rotation, UnitBearing, Vec3};
use crate::propagation::ScanBundle;
use crate::sim::trajectory::TrajectorySpec;
use crate::sim::world::SyntheticWorld;
use crate::uncertainty::LidarRay;
use crate::GRAVITY;

/// Noise magnitudes and the seed that drives every random draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Range standard deviation, m.
    pub range_std: f64,
    /// Bearing standard deviation per tangent axis, rad.
    pub bearing_std: f64,
    pub imu: ImuNoiseDensity,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { range_std: 0.02, bearing_std: 0.001, imu: ImuNoiseDensity::default(), seed: 1 }
    }
}

impl NoiseSpec {
    pub fn noiseless(seed: u64) -> Self {
        NoiseSpec {
            range_std: 0.0,
            bearing_std: 0.0,
            imu: ImuNoiseDensity { gyro: 0.0, acc: 0.0, gyro_walk: 0.0, acc_walk: 0.0 },
            seed,
        }
    }
}

/// Mechanical spinning LiDAR: evenly spaced channels, one revolution per scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarSpec {
    pub channels: usize,
    /// Half of the vertical field of view, rad.
    pub half_fov: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub extrinsic: Extrinsic,
    /// Shift the azimuth grid by a different fraction of a firing step each revolution,
    /// as a free-running spinner does. Off fires at identical azimuths every scan.
    pub phase_drift: bool,
}

impl Default for LidarSpec {
    fn default() -> Self {
        LidarSpec {
            channels: 16,
            half_fov: 35f64.to_radians(),
            min_range: 0.3,
            max_range: 60.0,
            extrinsic: Pose::new(Rotation::identity(), Vec3::new(0.04, 0.0, 0.08)),
            phase_drift: true,
        }
    }
}

pub const GRAVITY_VECTOR: Vec3 = Vec3::new(0.0, 0.0, -GRAVITY);

fn gaussian3<R: Rng>(rng: &mut R, std: f64) -> Vec3 {
    if std == 0.0 {
        return Vec3::zeros();
    }
    Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)) * std
}

/// IMU samples plus the true biases in effect at each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuRecord {
    pub samples: Vec<ImuSample>,
    pub gyro_bias: Vec<Vec3>,
    pub acc_bias: Vec<Vec3>,
}

/// Synthesizes `ω_m = ω + b_ω + n_ω` and `a_m = Rᵀ(a − g) + b_a + n_a` at the IMU rate.
///
/// White noise has per-sample deviation `density·√rate`; biases start at zero and
/// random-walk with per-step deviation `walk·√dt`.
pub fn generate_imu_record(traj: &TrajectorySpec, noise: &NoiseSpec) -> ImuRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(0);
    let dt = traj.imu_period();
    let n = (traj.duration * traj.imu_rate).round() as usize;
    let d = &noise.imu;
    let (sg, sa) = (d.gyro / dt.sqrt(), d.acc / dt.sqrt());
    let (sbg, sba) = (d.gyro_walk * dt.sqrt(), d.acc_walk * dt.sqrt());
    let mut bg = Vec3::zeros();
    let mut ba = Vec3::zeros();
    let mut out = ImuRecord {
        samples: Vec::with_capacity(n + 1),
        gyro_bias: Vec::with_capacity(n + 1),
        acc_bias: Vec::with_capacity(n + 1),
    };
    for i in 0..=n {
        let t = i as f64 * dt;
        let k = traj.sample(t);
        let gyro = k.omega + bg + gaussian3(&mut rng, sg);
        let acc = k.rot.matrix().transpose() * (k.acc - GRAVITY_VECTOR) + ba + gaussian3(&mut rng, sa);
        out.samples.push(ImuSample::new(t, gyro, acc));
        out.gyro_bias.push(bg);
        out.acc_bias.push(ba);
        bg += gaussian3(&mut rng, sbg);
        ba += gaussian3(&mut rng, sba);
    }
    out
}

pub fn generate_imu(traj: &TrajectorySpec, noise: &NoiseSpec) -> Vec<ImuSample> {
    generate_imu_record(traj, noise).samples
}

/// One simulated scan with its ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedScan {
    pub index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub rays: Vec<LidarRay>,
    /// Index of the patch each ray hit.
    pub patch: Vec<usize>,
    /// Rays fired during the scan, hits and misses alike.
    pub emitted: usize,
}

impl GeneratedScan {
    pub fn hit_ratio(&self) -> f64 {
        self.rays.len() as f64 / self.emitted.max(1) as f64
    }

    /// Pairs the returns with the IMU samples that span them.
    pub fn bundle(&self, imu: &[ImuSample]) -> ScanBundle {
        let first = imu.partition_point(|s| s.t <= self.t_start).saturating_sub(1);
        let last = imu.partition_point(|s| s.t <= self.t_end);
        ScanBundle { t_end: self.t_end, points: self.rays.clone(), imu: imu[first..last].to_vec() }
    }
}

/// Azimuth offset of scan `k` as a fraction of one firing step.
pub fn firing_phase(lidar: &LidarSpec, k: usize) -> f64 {
    if lidar.phase_drift {
        // Golden-ratio sequence: successive revolutions fill the gaps evenly.
        (0.5 + k as f64 * 0.618_033_988_749_894_8).fract()
    } else {
        0.5
    }
}

/// Unit firing direction of return `j` in the LiDAR frame, with the azimuth grid
/// shifted by `phase` firing steps.
pub fn firing_direction(lidar: &LidarSpec, points_per_scan: usize, j: usize, phase: f64) -> Vec3 {
    let ch = lidar.channels.max(1);
    let firings = points_per_scan.div_ceil(ch);
    let az = std::f64::consts::TAU * ((j / ch) as f64 + phase) / firings as f64;
    let el = if ch == 1 { 0.0 } else { -lidar.half_fov + 2.0 * lidar.half_fov * (j % ch) as f64 / (ch - 1) as f64 };
    Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin())
}

/// Casts scan `k` (1-based, covering `((k-1)T, kT]`) from the true sensor pose at each
/// return's capture time. Returns are expressed in the LiDAR frame at their own
/// capture time, so motion distortion is present.
pub fn generate_scan(
    traj: &TrajectorySpec,
    world: &SyntheticWorld,
    lidar: &LidarSpec,
    noise: &NoiseSpec,
    k: usize,
) -> GeneratedScan {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(k as u64 + 1);
    let period = traj.scan_period();
    let t_start = traj.scan_end(k.saturating_sub(1));
    let t_end = traj.scan_end(k);
    let n = traj.points_per_scan;
    let ext = lidar.extrinsic;
    let bearing_cov = Matrix2::identity() * noise.bearing_std * noise.bearing_std;
    let phase = firing_phase(lidar, k);
    let mut scan = GeneratedScan {
        index: k,
        t_start,
        t_end,
        rays: Vec::with_capacity(n),
        patch: Vec::with_capacity(n),
        emitted: n,
    };
    for j in 0..n {
        let t = if j + 1 == n { t_end } else { t_start + (j + 1) as f64 / n as f64 * period };
        let dir_l = firing_direction(lidar, n, j, phase);
        let sensor = traj.pose(t).compose(&ext);
        let dir_w = sensor.rot.rotate(&dir_l);
        let Some((range, id)) = world.cast(&sensor.trans, &dir_w) else {
            continue;
        };
        let bearing = if noise.bearing_std > 0.0 {
            let d = Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * noise.bearing_std;
            UnitBearing::new_unchecked(dir_l).boxplus(&d)
        } else {
            UnitBearing::new_unchecked(dir_l)
        };
        let depth =
            if noise.range_std > 0.0 { range + rng.sample::<f64, _>(StandardNormal) * noise.range_std } else { range };
        if !(range >= lidar.min_range && range <= lidar.max_range) {
            continue;
        }
        scan.rays.push(LidarRay { bearing, depth, t, range_var: noise.range_std * noise.range_std, bearing_cov });
        scan.patch.push(id);
    }
    scan
}
