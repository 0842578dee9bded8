//! Acceptance suite: one line per criterion, `criterion=N status=PASS|FAIL ...`.
//! Runs without the libtest harness so the lines are always printed; the process
//! exits nonzero when any criterion fails.

use std::time::Instant;

use voxlio_core::association::residual_variance;
use voxlio_core::config::{Corruption, RunConfig, VerifyConfig};
use voxlio_core::kinematics::{Pose, State};
use voxlio_core::manifold::Vec3;
use voxlio_core::pipeline::{simulate_dataset, Dataset, Odometry, ScanResult};
use voxlio_core::propagation::{backward_propagate, deskew_point};
use voxlio_core::sim::oracles::normal_cdf;
use voxlio_core::sim::sensors::GRAVITY_VECTOR;
use voxlio_core::sim::{
    evaluate_ate, generate_imu, generate_scan, LidarSpec, NoiseSpec, SyntheticWorld, TrajectoryKind, TrajectorySpec,
};
use voxlio_core::uncertainty::{local_point_cov, WorldPoint};
use voxlio_core::verify::{run_check, CheckResult};
use voxlio_core::voxel_map::{NodeContent, VoxelMap};

// Budgets and thresholds, fixed here.
const ROUND_TRIP_BUDGET_S: f64 = 5.0;
const JACOBIAN_BUDGET_S: f64 = 60.0;
const GAIN_BUDGET_S: f64 = 10.0;
const COVARIANCE_BUDGET_S: f64 = 300.0;
const DESKEW_MAX_RMS: f64 = 1e-3;
const RAW_MIN_RMS: f64 = 1e-2;
const ATE_MAX_RMSE: f64 = 0.05;
const ATE_MAX_ROT_DEG: f64 = 1.0;
const CLOSED_LOOP_BUDGET_S: f64 = 120.0;
const GATE_MIN_FRACTION: f64 = 0.97;
const GATE_MIN_RESIDUALS: usize = 10_000;
const GATE_ALPHA: f64 = 0.05;
const MAP_NOISE_SIGMAS: f64 = 3.0;
const MAP_NORMAL_MAX_DEG: f64 = 2.0;
/// Scans held out of the map to supply gate residuals.
const HELD_OUT_SCANS: usize = 10;
/// A leaf plane models the patch a ray hit when their normals agree this well.
const SAME_SURFACE_DEG: f64 = 10.0;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("criterion={id} name={name} status={} {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, name, pass, detail }
}

fn checks(names: &[&str]) -> (Vec<CheckResult>, f64) {
    let cfg = VerifyConfig { seed: 1, corrupt: Corruption::None };
    let start = Instant::now();
    let out = names.iter().map(|n| run_check(n, &cfg).expect("registered check")).collect();
    (out, start.elapsed().as_secs_f64())
}

fn check_criterion(id: u32, name: &'static str, names: &[&str], budget: f64) -> Outcome {
    let (results, secs) = checks(names);
    let pass = results.iter().all(|c| c.passed) && secs < budget;
    let values: Vec<String> = results.iter().map(|c| format!("{}={:.3e}/{:.0e}", c.name, c.value, c.tol)).collect();
    report(id, name, pass, format!("{} runtime_s={secs:.2} budget_s={budget}", values.join(" ")))
}

fn truth_state(traj: &TrajectorySpec, t: f64) -> State {
    let k = traj.sample(t);
    State { rot: k.rot, pos: k.pos, vel: k.vel, grav: GRAVITY_VECTOR, ..State::default() }
}

fn deskew_efficacy() -> Outcome {
    let traj = TrajectorySpec { kind: TrajectoryKind::Spin { rate: 1.0 }, duration: 6.0, ..TrajectorySpec::default() };
    let world = SyntheticWorld::corner_room();
    let lidar = LidarSpec::default();
    let noise = NoiseSpec::noiseless(1);
    let imu = generate_imu(&traj, &noise);
    // Well past the ramp, so the yaw rate is the nominal 1 rad/s throughout the sweep.
    let scan = generate_scan(&traj, &world, &lidar, &noise, 50);
    let rel = backward_propagate(&scan.bundle(&imu), &truth_state(&traj, scan.t_end)).expect("IMU covers the scan");
    let end = traj.pose(scan.t_end).compose(&lidar.extrinsic);
    let (mut deskewed, mut raw) = (0.0, 0.0);
    for ((ray, m), &label) in scan.rays.iter().zip(&rel).zip(&scan.patch) {
        let patch = &world.patches[label];
        let dist = |p: Vec3| patch.normal().dot(&(end.apply(&p) - patch.center));
        deskewed += dist(deskew_point(ray, m, &lidar.extrinsic)).powi(2);
        raw += dist(ray.point()).powi(2);
    }
    let n = scan.rays.len() as f64;
    let (deskewed, raw) = ((deskewed / n).sqrt(), (raw / n).sqrt());
    report(
        7,
        "deskew_efficacy",
        deskewed < DESKEW_MAX_RMS && raw > RAW_MIN_RMS,
        format!(
            "deskewed_rms={deskewed:.3e} raw_rms={raw:.3e} points={} tol=<{DESKEW_MAX_RMS:.0e}/>{RAW_MIN_RMS:.0e}",
            scan.rays.len()
        ),
    )
}

/// Residuals of held-out rays against the plane leaf they fall in, when that plane
/// models the surface the ray actually hit. Points are placed with the true pose, so
/// the gate sees only the plane and point noise.
fn gate_residuals(
    map: &VoxelMap,
    data: &Dataset,
    cfg: &RunConfig,
    traj: &TrajectorySpec,
    scans: std::ops::Range<usize>,
) -> (usize, usize) {
    let world = cfg.sim.world();
    let cos_same = SAME_SURFACE_DEG.to_radians().cos();
    let (mut total, mut inside) = (0, 0);
    for scan in &data.scans[scans] {
        for (ray, &label) in scan.rays.iter().zip(&scan.patch) {
            let pose = traj.pose(ray.t).compose(&cfg.extrinsic);
            let lp = local_point_cov(ray);
            let r = pose.rot.matrix();
            let wp = WorldPoint::new(pose.apply(&lp.p), r * lp.cov * r.transpose());
            let Some(leaf) = map.leaf_at(&wp.p) else { continue };
            let NodeContent::Plane(pl) = &leaf.content else { continue };
            if pl.plane.normal.dot(&world.patches[label].normal()).abs() < cos_same {
                continue;
            }
            total += 1;
            let var = residual_variance(&pl.plane, &wp);
            inside += (pl.plane.distance(&wp.p).abs() <= 3.0 * var.sqrt()) as usize;
        }
    }
    (total, inside)
}

/// One-sided p-value of observing at most `k` successes in `n` trials at rate `p`
/// (normal approximation with continuity correction).
fn binomial_lower_pvalue(k: usize, n: usize, p: f64) -> f64 {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    normal_cdf((k as f64 + 0.5 - mean) / sd)
}

struct ClosedLoop {
    results: Vec<ScanResult>,
    engine: Odometry,
    secs: f64,
    gate: Option<(usize, usize)>,
}

fn closed_loop(cfg: &RunConfig, data: &Dataset, with_gate: bool) -> ClosedLoop {
    let start = Instant::now();
    let mut engine = Odometry::from_imu(cfg.clone(), &data.imu.samples).expect("valid IMU");
    let mut results = Vec::with_capacity(data.scans.len());
    let split = data.scans.len() - HELD_OUT_SCANS;
    let mut gate = None;
    for (k, scan) in data.scans.iter().enumerate() {
        if with_gate && k == split {
            let traj = cfg.sim.trajectory_spec();
            gate = Some(gate_residuals(engine.map(), data, cfg, &traj, split..data.scans.len()));
        }
        results.push(engine.process_scan(&scan.rays, scan.t_end, &data.imu.samples).expect("scan processes"));
    }
    let secs = start.elapsed().as_secs_f64();
    ClosedLoop { results, engine, secs, gate }
}

fn truth_series(cfg: &RunConfig, data: &Dataset) -> Vec<(f64, Pose)> {
    let traj = cfg.sim.trajectory_spec();
    data.imu.samples.iter().map(|s| (s.t, traj.pose(s.t))).collect()
}

fn estimate_series(results: &[ScanResult]) -> Vec<(f64, Pose)> {
    results.iter().map(|r| (r.t, r.pose())).collect()
}

fn seeded(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.sim.noise.seed = seed;
    cfg
}

/// Plane-leaf structure of a map against the world's patches. A cube "meets" a
/// patch when it does so after inflation by `margin`, so range noise cannot put a
/// wall's points in a cube the wall itself misses.
struct MapStructure {
    planes: usize,
    max_depth: u8,
    /// Converged planes whose cube meets exactly one patch, and their largest
    /// normal error in degrees.
    settled: usize,
    settled_max_deg: f64,
    /// Every single-patch plane, settled or still accumulating.
    single_planes: usize,
    single_max_deg: f64,
    single_off: usize,
    /// Planes in cubes straddling an edge between patches.
    mixed_planes: usize,
    mixed_off: usize,
    /// Patches without a settled plane.
    uncovered: usize,
    /// Root voxels meeting exactly one patch that were subdivided anyway.
    split_single_roots: usize,
    single_roots: usize,
}

fn map_structure(map: &VoxelMap, world: &SyntheticWorld, margin: f64) -> MapStructure {
    let mut s = MapStructure {
        planes: 0,
        max_depth: 0,
        settled: 0,
        settled_max_deg: 0.0,
        single_planes: 0,
        single_max_deg: 0.0,
        single_off: 0,
        mixed_planes: 0,
        mixed_off: 0,
        uncovered: 0,
        split_single_roots: 0,
        single_roots: 0,
    };
    let mut covered = vec![false; world.patches.len()];
    let meeting = |c: &Vec3, h: f64| -> Vec<usize> {
        (0..world.patches.len()).filter(|&i| world.patches[i].intersects_cube(c, h + margin)).collect()
    };
    map.for_each_node(|_, n| {
        let hits = meeting(&n.center, n.half_size);
        if n.depth == 0 && hits.len() == 1 {
            s.single_roots += 1;
            s.split_single_roots += matches!(n.content, NodeContent::Children(_)) as usize;
        }
        let NodeContent::Plane(leaf) = &n.content else { return };
        s.planes += 1;
        s.max_depth = s.max_depth.max(n.depth);
        let err = |i: usize| leaf.plane.normal.dot(&world.patches[i].normal()).abs().min(1.0).acos().to_degrees();
        let best = hits.iter().map(|&i| err(i)).fold(f64::INFINITY, f64::min);
        let off = (best > MAP_NORMAL_MAX_DEG) as usize;
        if hits.len() == 1 {
            s.single_planes += 1;
            s.single_max_deg = s.single_max_deg.max(best);
            s.single_off += off;
            if leaf.converged {
                s.settled += 1;
                s.settled_max_deg = s.settled_max_deg.max(best);
                covered[hits[0]] = true;
            }
        } else {
            s.mixed_planes += 1;
            s.mixed_off += off;
        }
    });
    s.uncovered = covered.iter().filter(|c| !**c).count();
    s
}

fn main() {
    let mut outcomes = vec![
        check_criterion(1, "manifold_round_trip", &["manifold_round_trip"], ROUND_TRIP_BUDGET_S),
        check_criterion(
            2,
            "jacobian_oracles",
            &["transition_fd", "noise_jacobian_fd", "plane_normal_fd", "observation_fd", "prior_jacobian_fd"],
            JACOBIAN_BUDGET_S,
        ),
        check_criterion(3, "method_equivalence", &["method_equivalence"], f64::INFINITY),
        check_criterion(4, "smw_gain_identity", &["gain_smw_n1", "gain_smw_n10", "gain_smw_n200"], GAIN_BUDGET_S),
        check_criterion(
            5,
            "covariance_oracles",
            &["local_point_cov_mc", "world_point_cov_mc", "plane_cov_mc", "residual_variance_mc"],
            COVARIANCE_BUDGET_S,
        ),
        check_criterion(6, "linear_map_equivalence", &["linear_map"], f64::INFINITY),
        deskew_efficacy(),
    ];

    let mut runs = Vec::new();
    let mut details = Vec::new();
    let mut closed_pass = true;
    for seed in 1..=3 {
        let cfg = seeded(seed);
        let data = simulate_dataset(&cfg).expect("simulation");
        let run = closed_loop(&cfg, &data, seed == 1);
        let ate = evaluate_ate(&estimate_series(&run.results), &truth_series(&cfg, &data)).expect("aligned series");
        let rot_deg = ate.max_rotation_error.to_degrees();
        let ok = ate.rmse < ATE_MAX_RMSE
            && rot_deg < ATE_MAX_ROT_DEG
            && !run.engine.estimation_failed()
            && run.secs < CLOSED_LOOP_BUDGET_S;
        closed_pass &= ok;
        details.push(format!(
            "seed{seed}:ate_rmse={:.4} max_rot_deg={rot_deg:.3} failures={} runtime_s={:.1}",
            ate.rmse,
            run.engine.failures(),
            run.secs
        ));
        runs.push((cfg, data, run));
    }
    outcomes.push(report(
        8,
        "closed_loop_figure_eight",
        closed_pass,
        format!("{} tol=<{ATE_MAX_RMSE}m/<{ATE_MAX_ROT_DEG}deg/<{CLOSED_LOOP_BUDGET_S}s", details.join(" ")),
    ));

    let (total, inside) = runs[0].2.gate.expect("gate residuals collected");
    let fraction = inside as f64 / total.max(1) as f64;
    let p_value = binomial_lower_pvalue(inside, total, GATE_MIN_FRACTION);
    outcomes.push(report(
        9,
        "gate_calibration",
        total >= GATE_MIN_RESIDUALS && p_value >= GATE_ALPHA,
        format!(
            "residuals={total} within_3sigma={fraction:.4} binomial_p={p_value:.3e} tol=>={GATE_MIN_FRACTION} n>={GATE_MIN_RESIDUALS} alpha={GATE_ALPHA}"
        ),
    ));

    let (cfg, data, run) = &runs[0];
    let world = cfg.sim.world();
    let margin = MAP_NOISE_SIGMAS * cfg.sim.noise.range_std;
    let s = map_structure(run.engine.map(), &world, margin);
    let rerun = closed_loop(cfg, data, false);
    let deterministic =
        rerun.results == run.results && rerun.engine.map().dump_stats() == run.engine.map().dump_stats();
    let pass = s.settled > 0
        && s.uncovered == 0
        && s.max_depth <= cfg.map.max_depth
        && s.split_single_roots == 0
        && s.settled_max_deg <= MAP_NORMAL_MAX_DEG
        && deterministic;
    outcomes.push(report(
        10,
        "map_structure",
        pass,
        format!(
            "settled_planes={} settled_max_deg={:.3} uncovered_patches={} split_single_roots={}/{} max_depth={}/{} deterministic={deterministic} \
             all_planes={} single_patch={} single_off={} single_max_deg={:.2} edge_planes={} edge_off={} margin_m={margin} tol=<={MAP_NORMAL_MAX_DEG}deg",
            s.settled,
            s.settled_max_deg,
            s.uncovered,
            s.split_single_roots,
            s.single_roots,
            s.max_depth,
            cfg.map.max_depth,
            s.planes,
            s.single_planes,
            s.single_off,
            s.single_max_deg,
            s.mixed_planes,
            s.mixed_off,
        ),
    ));

    let failed: Vec<String> = outcomes.iter().filter(|o| !o.pass).map(|o| format!("{}:{}", o.id, o.name)).collect();
    println!("acceptance criteria={} passed={}", outcomes.len(), outcomes.len() - failed.len());
    if !failed.is_empty() {
        for o in outcomes.iter().filter(|o| !o.pass) {
            eprintln!("failed criterion {} ({}): {}", o.id, o.name, o.detail);
        }
        std::process::exit(1);
    }
}
