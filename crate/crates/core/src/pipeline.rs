//! End-to-end odometry: per scan, propagate, undistort, run the iterated update against
//! the map, then register the scan and grow the map. Also the simulator front end.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::association::{observation_row, residual_variance};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ieskf::{iterate_update, Measurement, UpdateDiagnostics};
use crate::io::{self, ScanReader};
use crate::kinematics::{Cov, ImuSample, NoiseCov, Pose, State, BA, BG, GRAV, POS, ROT, VEL};
use crate::manifold::{Mat3, Vec3};
use crate::propagation::{backward_propagate, deskew_local, forward_propagate, PropagatedBelief, ScanBundle};
use crate::sim::{generate_imu_record, generate_scan, GeneratedScan, ImuRecord};
use crate::uncertainty::{local_point_cov, world_point_cov, LidarRay, LocalPoint, PlaneFeature, WorldPoint};
use crate::voxel_map::{InsertReport, VoxelMap};

/// How a scan was handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanStatus {
    /// First scan: registered with the propagated pose to seed the map.
    Initialized,
    Updated,
    /// No usable matches (or a singular update); the propagated belief was kept.
    NoMatches,
}

impl ScanStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScanStatus::Initialized => "init",
            ScanStatus::Updated => "ok",
            ScanStatus::NoMatches => "no_matches",
        }
    }
}

/// A registered point with the plane it matched after the update, if any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMatch {
    /// Index into the rays passed to [`Odometry::process_scan`].
    pub index: usize,
    pub distance: f64,
    pub variance: f64,
    pub plane: PlaneFeature,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult {
    pub index: usize,
    pub t: f64,
    pub status: ScanStatus,
    pub state: State,
    pub cov: Cov,
    /// Points that entered the update after range filtering and striding.
    pub points: usize,
    pub update: Option<UpdateDiagnostics>,
    /// Registered points that pass the match gate at the posterior.
    pub gate_inliers: usize,
    pub insert: InsertReport,
    /// Populated when [`Odometry::record_matches`] is set.
    pub matches: Vec<PointMatch>,
}

impl ScanResult {
    pub fn pose(&self) -> Pose {
        self.state.pose()
    }

    /// One `key=value` diagnostics record.
    pub fn diagnostics_line(&self) -> String {
        let u = self.update.unwrap_or(UpdateDiagnostics {
            iterations: 0,
            converged: false,
            residuals: 0,
            mean_normalized_residual: 0.0,
            condition_number: 0.0,
        });
        format!(
            "scan={} t={} status={} points={} matches={} iterations={} converged={} mean_normalized_residual={:.6e} condition={:.6e} gate_inliers={} planes_created={} planes_converged={} rebuilt={}",
            self.index,
            io::num(self.t),
            self.status.as_str(),
            self.points,
            u.residuals,
            u.iterations,
            u.converged,
            u.mean_normalized_residual,
            u.condition_number,
            self.gate_inliers,
            self.insert.planes_created,
            self.insert.planes_converged,
            self.insert.rebuilt,
        )
    }
}

/// The odometry engine. Feed it IMU samples and scans in time order.
pub struct Odometry {
    cfg: RunConfig,
    q: NoiseCov,
    belief: PropagatedBelief,
    map: VoxelMap,
    scans: usize,
    failures: usize,
    /// Keep per-point post-update matches in each [`ScanResult`].
    pub record_matches: bool,
}

/// Initial belief from the leading stationary IMU span: identity attitude at the origin,
/// gravity from the mean specific force and gyro bias from the mean rate.
pub fn initial_belief(imu: &[ImuSample], cfg: &RunConfig) -> Result<PropagatedBelief> {
    let first = imu.first().ok_or(Error::EmptyImuSpan)?;
    let window = imu.iter().take_while(|s| s.t <= first.t + cfg.pipeline.init_time).count().max(1);
    let mut state = State::from_stationary(imu, window)?;
    state.bg = imu[..window].iter().map(|s| s.gyro).sum::<Vec3>() / window as f64;
    let p = &cfg.pipeline;
    let mut cov = Cov::zeros();
    for (at, std) in [
        (ROT, p.init_attitude_std),
        (POS, p.init_position_std),
        (VEL, p.init_velocity_std),
        (BG, p.init_gyro_bias_std),
        (BA, p.init_acc_bias_std),
        (GRAV, p.init_gravity_std),
    ] {
        for i in 0..3 {
            cov[(at + i, at + i)] = std * std;
        }
    }
    Ok(PropagatedBelief { t: first.t, state, cov })
}

fn block3(cov: &Cov, at: usize) -> Mat3 {
    cov.fixed_view::<3, 3>(at, at).into_owned()
}

/// Moves a LiDAR-frame point into the IMU frame.
fn to_imu_frame(lp: &LocalPoint, cfg: &RunConfig) -> LocalPoint {
    let r = cfg.extrinsic.rot.matrix();
    LocalPoint { p: cfg.extrinsic.apply(&lp.p), cov: r * lp.cov * r.transpose() }
}

fn register(lp: &LocalPoint, x: &State, cov: &Cov, cfg: &RunConfig) -> WorldPoint {
    world_point_cov(&to_imu_frame(lp, cfg), &x.rot, &x.pos, &block3(cov, ROT), &block3(cov, POS))
}

impl Odometry {
    /// `imu_period` sets the discrete process noise; `initial` is the belief at the
    /// first IMU sample.
    pub fn new(cfg: RunConfig, imu_period: f64, initial: PropagatedBelief) -> Self {
        Odometry {
            q: cfg.imu_noise.covariance(imu_period),
            map: VoxelMap::new(cfg.map),
            cfg,
            belief: initial,
            scans: 0,
            failures: 0,
            record_matches: false,
        }
    }

    /// Builds the engine from a complete IMU log, checking it for gaps.
    pub fn from_imu(cfg: RunConfig, imu: &[ImuSample]) -> Result<Self> {
        let period = io::imu_sample_period(imu)?;
        let initial = initial_belief(imu, &cfg)?;
        Ok(Odometry::new(cfg, period, initial))
    }

    pub fn map(&self) -> &VoxelMap {
        &self.map
    }

    pub fn belief(&self) -> &PropagatedBelief {
        &self.belief
    }

    pub fn scans_processed(&self) -> usize {
        self.scans
    }

    pub fn failures(&self) -> usize {
        self.failures
    }

    /// Whether the share of scans without matches exceeds the configured limit.
    pub fn estimation_failed(&self) -> bool {
        self.scans > 0 && self.failures as f64 > self.cfg.pipeline.failure_ratio * self.scans as f64
    }

    /// Processes one scan ending at `t_end`. `imu` must cover the interval from the
    /// current belief time (or the earliest return, if earlier) through `t_end`.
    pub fn process_scan(&mut self, rays: &[LidarRay], t_end: f64, imu: &[ImuSample]) -> Result<ScanResult> {
        let (start, end) = match (imu.first(), imu.last()) {
            (Some(a), Some(b)) => (a.t, b.t),
            _ => return Err(Error::EmptyImuSpan),
        };
        if end < t_end {
            return Err(Error::TimestampOutOfSpan { t: t_end, start, end });
        }
        let pc = &self.cfg.pipeline;
        let kept: Vec<usize> =
            (0..rays.len()).filter(|&i| rays[i].depth >= pc.min_range).step_by(pc.point_stride).collect();
        let points: Vec<LidarRay> = kept.iter().map(|&i| rays[i]).collect();

        let prior = forward_propagate(&self.belief, imu, t_end, &self.q, self.cfg.jacobian_mode)?;
        let lo = points.iter().map(|r| r.t).fold(t_end, f64::min);
        let first = imu.partition_point(|s| s.t <= lo).saturating_sub(1);
        let last = imu.partition_point(|s| s.t <= t_end);
        let bundle = ScanBundle { t_end, points, imu: imu[first..last].to_vec() };
        let rel = backward_propagate(&bundle, &prior.state)?;
        let local: Vec<LocalPoint> = bundle
            .points
            .iter()
            .zip(&rel)
            .map(|(r, m)| deskew_local(&local_point_cov(r), m, &self.cfg.extrinsic))
            .collect();

        let first_scan = self.scans == 0;
        self.scans += 1;
        let (status, state, cov, update) = if first_scan {
            (ScanStatus::Initialized, prior.state, prior.cov, None)
        } else {
            match self.update(&prior, &local) {
                Ok(out) => (ScanStatus::Updated, out.state, out.cov, Some(out.diagnostics)),
                Err(Error::NoValidMatches | Error::SingularInformationMatrix) => {
                    self.failures += 1;
                    (ScanStatus::NoMatches, prior.state, prior.cov, None)
                }
                Err(e) => return Err(e),
            }
        };

        let world: Vec<WorldPoint> = local.iter().map(|lp| register(lp, &state, &cov, &self.cfg)).collect();
        let mut gate_inliers = 0;
        let mut matches = Vec::new();
        for (k, wp) in world.iter().enumerate() {
            if let Some(m) = self.map.query_match(wp) {
                gate_inliers += 1;
                if self.record_matches {
                    matches.push(PointMatch {
                        index: kept[k],
                        distance: m.distance,
                        variance: m.variance,
                        plane: *m.plane,
                    });
                }
            }
        }
        let origin = state.pose().apply(&self.cfg.extrinsic.trans);
        let insert = self.map.insert_points(&world, &origin);
        self.belief = PropagatedBelief { t: t_end, state, cov };
        Ok(ScanResult {
            index: self.scans,
            t: t_end,
            status,
            state,
            cov,
            points: local.len(),
            update,
            gate_inliers,
            insert,
            matches,
        })
    }

    fn update(&self, prior: &PropagatedBelief, local: &[LocalPoint]) -> Result<crate::ieskf::UpdateOutcome> {
        let cfg = &self.cfg;
        let map = &self.map;
        let gate_cov = prior.cov;
        let mut fixed: Option<Vec<(usize, PlaneFeature)>> = None;
        let mut provider = |x: &State, _it: usize| -> Vec<Measurement> {
            let pairs: Vec<(usize, PlaneFeature)> = match &fixed {
                Some(p) if !cfg.filter.requery => p.clone(),
                _ => {
                    let found: Vec<(usize, PlaneFeature)> = local
                        .iter()
                        .enumerate()
                        .filter_map(|(i, lp)| map.query_match(&register(lp, x, &gate_cov, cfg)).map(|m| (i, *m.plane)))
                        .collect();
                    fixed = Some(found.clone());
                    found
                }
            };
            pairs
                .iter()
                .map(|(i, plane)| Measurement::from(&observation_row(x, plane, &local[*i], &cfg.extrinsic)))
                .filter(|m| m.var > 0.0)
                .collect()
        };
        iterate_update(prior, &mut provider, &cfg.filter)
    }
}

/// Gate statistic of a registered point against a plane: `(d, Σ_d)`.
pub fn gate_statistic(plane: &PlaneFeature, wp: &WorldPoint) -> (f64, f64) {
    (plane.distance(&wp.p), residual_variance(plane, wp))
}

/// Summary of a completed odometry run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdometryReport {
    pub scans: usize,
    pub failures: usize,
    pub estimation_failed: bool,
}

fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::Config(format!("{key} is required")))
}

/// Writes into `name.partial` and renames on commit, so failed runs leave no output.
struct StagedFile {
    tmp: PathBuf,
    dest: PathBuf,
    w: BufWriter<File>,
}

impl StagedFile {
    fn create(dir: &Path, name: &str) -> Result<Self> {
        let dest = dir.join(name);
        let tmp = dir.join(format!("{name}.partial"));
        Ok(StagedFile { w: BufWriter::new(File::create(&tmp)?), tmp, dest })
    }

    fn commit(mut self) -> Result<()> {
        self.w.flush()?;
        fs::rename(&self.tmp, &self.dest)?;
        Ok(())
    }

    fn discard(self) {
        drop(self.w);
        let _ = fs::remove_file(&self.tmp);
    }
}

/// Runs odometry over the configured IMU and scan files and writes `trajectory.txt`,
/// `map_stats.txt` and `diagnostics.log` into the output directory.
pub fn run_odometry(cfg: &RunConfig) -> Result<OdometryReport> {
    cfg.validate()?;
    let imu_path = require(&cfg.imu_path, "input.imu")?;
    let scan_path = require(&cfg.scan_path, "input.scans")?;
    let imu = io::read_imu(&imu_path)?;
    let mut engine = Odometry::from_imu(cfg.clone(), &imu)?;
    let mut reader = ScanReader::open(&scan_path)?.peekable();
    if reader.peek().is_none() {
        return Err(Error::Parse {
            path: scan_path.display().to_string(),
            line: 1,
            column: 1,
            message: "scan file contains no scans".into(),
        });
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let mut traj = StagedFile::create(&cfg.output_dir, "trajectory.txt")?;
    let mut diag = StagedFile::create(&cfg.output_dir, "diagnostics.log")?;
    let result = (|| -> Result<()> {
        for scan in reader {
            let scan = scan?;
            let rays = scan.rays(cfg.lidar_noise.range_std, cfg.lidar_noise.bearing_std);
            let res = engine.process_scan(&rays, scan.t_end, &imu)?;
            io::write_pose_row(&mut traj.w, res.t, &res.pose())?;
            writeln!(diag.w, "{}", res.diagnostics_line())?;
        }
        writeln!(
            diag.w,
            "summary scans={} failures={} estimation_failed={}",
            engine.scans_processed(),
            engine.failures(),
            engine.estimation_failed()
        )?;
        Ok(())
    })();
    if let Err(e) = result {
        traj.discard();
        diag.discard();
        return Err(e);
    }
    traj.commit()?;
    diag.commit()?;
    let mut stats = StagedFile::create(&cfg.output_dir, "map_stats.txt")?;
    stats.w.write_all(engine.map().dump_stats().as_bytes())?;
    stats.commit()?;
    Ok(OdometryReport {
        scans: engine.scans_processed(),
        failures: engine.failures(),
        estimation_failed: engine.estimation_failed(),
    })
}

/// A complete simulated dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub imu: ImuRecord,
    pub scans: Vec<GeneratedScan>,
}

impl Dataset {
    pub fn mean_hit_ratio(&self) -> f64 {
        self.scans.iter().map(|s| s.hit_ratio()).sum::<f64>() / self.scans.len().max(1) as f64
    }
}

pub fn simulate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let traj = cfg.sim.trajectory_spec();
    let world = cfg.sim.world();
    let lidar = cfg.sim.lidar_spec(&cfg.extrinsic, cfg.pipeline.min_range);
    let imu = generate_imu_record(&traj, &cfg.sim.noise);
    let scans = (1..=traj.scan_count()).map(|k| generate_scan(&traj, &world, &lidar, &cfg.sim.noise, k)).collect();
    Ok(Dataset { imu, scans })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationReport {
    pub scans: usize,
    pub imu_samples: usize,
    pub mean_hit_ratio: f64,
    pub min_hit_ratio: f64,
}

/// Generates a dataset and writes `imu.txt`, `scans.txt`, `groundtruth.txt` (IMU pose
/// at every IMU sample) and `sim_report.txt` into the output directory.
pub fn run_simulate(cfg: &RunConfig) -> Result<SimulationReport> {
    cfg.validate()?;
    let traj = cfg.sim.trajectory_spec();
    let world = cfg.sim.world();
    let lidar = cfg.sim.lidar_spec(&cfg.extrinsic, cfg.pipeline.min_range);
    let imu = generate_imu_record(&traj, &cfg.sim.noise);
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;

    let mut f = StagedFile::create(dir, "imu.txt")?;
    io::write_imu(&mut f.w, &imu.samples)?;
    f.commit()?;

    let mut f = StagedFile::create(dir, "groundtruth.txt")?;
    for s in &imu.samples {
        io::write_pose_row(&mut f.w, s.t, &traj.pose(s.t))?;
    }
    f.commit()?;

    let mut f = StagedFile::create(dir, "scans.txt")?;
    let mut min_hit = f64::INFINITY;
    let mut sum_hit = 0.0;
    let n = traj.scan_count();
    for k in 1..=n {
        let scan = generate_scan(&traj, &world, &lidar, &cfg.sim.noise, k);
        min_hit = min_hit.min(scan.hit_ratio());
        sum_hit += scan.hit_ratio();
        io::write_scan(&mut f.w, scan.t_end, &scan.rays)?;
    }
    f.commit()?;

    let report = SimulationReport {
        scans: n,
        imu_samples: imu.samples.len(),
        mean_hit_ratio: sum_hit / n as f64,
        min_hit_ratio: min_hit,
    };
    let mut f = StagedFile::create(dir, "sim_report.txt")?;
    writeln!(f.w, "scans={}", report.scans)?;
    writeln!(f.w, "imu_samples={}", report.imu_samples)?;
    writeln!(f.w, "mean_hit_ratio={:.6}", report.mean_hit_ratio)?;
    writeln!(f.w, "min_hit_ratio={:.6}", report.min_hit_ratio)?;
    f.commit()?;
    Ok(report)
}

/// Runs the engine over an in-memory dataset.
pub fn run_dataset(cfg: &RunConfig, data: &Dataset, record_matches: bool) -> Result<(Odometry, Vec<ScanResult>)> {
    let mut engine = Odometry::from_imu(cfg.clone(), &data.imu.samples)?;
    engine.record_matches = record_matches;
    let mut out = Vec::with_capacity(data.scans.len());
    for scan in &data.scans {
        out.push(engine.process_scan(&scan.rays, scan.t_end, &data.imu.samples)?);
    }
    Ok((engine, out))
}
