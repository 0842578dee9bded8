//! Self-check suite: every analytic derivative and covariance in the estimator is
//! compared against an independent brute-force computation (central differences,
//! Monte-Carlo sampling, or the algebraically equivalent closed form).
//!
//! Each check reports one scalar error and the tolerance it was held to. A
//! [`Corruption`] perturbs the analytic side of exactly one family of checks so the
//! suite can be shown to catch a broken derivation.

use nalgebra::{DMatrix, DVector, Matrix2, SMatrix, SVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::association::{observation_row, residual_value, residual_variance, ObservationRow};
use crate::config::{Corruption, VerifyConfig};
use crate::ieskf::{
    iterate_update, kalman_gain_efficient, kalman_gain_naive, map_objective, prior_jacobian, FilterConfig, Measurement,
    PriorJacobianMode,
};
use crate::kinematics::{
    propagate_discrete, propagate_discrete_noisy, Cov, Extrinsic, ImuSample, ProcessNoise, State, Tangent, NOISE_DIM,
    STATE_DIM,
};
use crate::manifold::{so3_exp, Mat3, UnitBearing, Vec3};
use crate::propagation::{transition_jacobians_ct, transition_jacobians_discrete, JacobianMode, PropagatedBelief};
use crate::sim::oracles::{central_difference, relative_frobenius, sample_covariance, GaussianSampler};
use crate::uncertainty::{
    fit_plane, local_point_cov, normal_tangent_basis, plane_jacobians, world_point_cov, LidarRay, LocalPoint,
    PlaneFeature, PlaneFitConfig, WorldPoint,
};

/// Random instances per finite-difference check.
pub const FD_INSTANCES: usize = 100;
/// Random inputs compared by the two transition derivations.
pub const EQUIVALENCE_INSTANCES: usize = 1000;
/// Compound-manifold instances per round-trip check.
pub const ROUND_TRIP_INSTANCES: usize = 10_000;
/// Finite-difference agreement, relative Frobenius.
pub const FD_TOL: f64 = 1e-5;
/// Efficient against naive gain, relative Frobenius.
pub const GAIN_TOL: f64 = 1e-8;
/// Sampled against analytic covariance, relative.
pub const MC_TOL: f64 = 0.10;

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst error observed.
    pub value: f64,
    pub tol: f64,
}

impl CheckResult {
    fn new(name: &'static str, value: f64, tol: f64) -> Self {
        CheckResult { name, passed: value <= tol, value, tol }
    }

    pub fn line(&self) -> String {
        format!(
            "check={} status={} value={:e} tol={:e}",
            self.name,
            if self.passed { "pass" } else { "fail" },
            self.value,
            self.tol
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn passed(&self) -> usize {
        self.checks.iter().filter(|c| c.passed).count()
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// One `check=` line per check, then a `checks= passed=` summary.
    pub fn render(&self) -> String {
        let mut out: String = self.checks.iter().map(|c| c.line() + "\n").collect();
        out.push_str(&format!("checks={} passed={}\n", self.checks.len(), self.passed()));
        out
    }
}

type CheckFn = fn(&mut ChaCha8Rng, Corruption) -> f64;

struct Check {
    name: &'static str,
    tol: f64,
    run: CheckFn,
}

const REGISTRY: [Check; 15] = [
    Check { name: "manifold_round_trip", tol: 1e-10, run: manifold_round_trip },
    Check { name: "transition_fd", tol: FD_TOL, run: transition_fd },
    Check { name: "noise_jacobian_fd", tol: FD_TOL, run: noise_jacobian_fd },
    Check { name: "plane_normal_fd", tol: FD_TOL, run: plane_normal_fd },
    Check { name: "observation_fd", tol: FD_TOL, run: observation_fd },
    Check { name: "prior_jacobian_fd", tol: FD_TOL, run: prior_jacobian_fd },
    Check { name: "method_equivalence", tol: 0.0, run: method_equivalence },
    Check { name: "gain_smw_n1", tol: GAIN_TOL, run: |r, c| gain_identity(r, c, 1) },
    Check { name: "gain_smw_n10", tol: GAIN_TOL, run: |r, c| gain_identity(r, c, 10) },
    Check { name: "gain_smw_n200", tol: GAIN_TOL, run: |r, c| gain_identity(r, c, 200) },
    Check { name: "linear_map", tol: 1e-8, run: linear_map },
    Check { name: "local_point_cov_mc", tol: MC_TOL, run: local_point_cov_mc },
    Check { name: "world_point_cov_mc", tol: MC_TOL, run: world_point_cov_mc },
    Check { name: "plane_cov_mc", tol: MC_TOL, run: plane_cov_mc },
    Check { name: "residual_variance_mc", tol: MC_TOL, run: residual_variance_mc },
];

fn registry() -> impl Iterator<Item = &'static Check> {
    REGISTRY.iter()
}

/// Names of every registered check, in report order.
pub fn check_names() -> Vec<&'static str> {
    registry().map(|c| c.name).collect()
}

/// Runs one registered check. Each check draws from its own stream derived from the
/// seed and its position, so results do not depend on which other checks ran.
pub fn run_check(name: &str, cfg: &VerifyConfig) -> Option<CheckResult> {
    registry().enumerate().find(|(_, c)| c.name == name).map(|(i, c)| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
        let value = (c.run)(&mut rng, cfg.corrupt);
        // NaN must never count as agreement.
        CheckResult::new(c.name, if value.is_nan() { f64::INFINITY } else { value }, c.tol)
    })
}

/// Runs every registered check.
pub fn run_verify(cfg: &VerifyConfig) -> VerifyReport {
    VerifyReport { checks: registry().filter_map(|c| run_check(c.name, cfg)).collect() }
}

fn corrupt_if(active: bool, m: DMatrix<f64>, factor: f64) -> DMatrix<f64> {
    if active {
        m * factor
    } else {
        m
    }
}

fn to_dmat<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

fn to_dvec<const R: usize>(v: &SVector<f64, R>) -> DVector<f64> {
    DVector::from_column_slice(v.as_slice())
}

fn uniform3(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
    Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

fn random_state(rng: &mut ChaCha8Rng) -> State {
    State {
        rot: so3_exp(&uniform3(rng, 2.0)),
        pos: uniform3(rng, 5.0),
        vel: uniform3(rng, 2.0),
        bg: uniform3(rng, 0.05),
        ba: uniform3(rng, 0.2),
        grav: Vec3::new(0.0, 0.0, -crate::GRAVITY) + uniform3(rng, 0.1),
    }
}

fn random_input(rng: &mut ChaCha8Rng) -> ImuSample {
    ImuSample::new(0.0, uniform3(rng, 2.0), uniform3(rng, 3.0) + Vec3::new(0.0, 0.0, crate::GRAVITY))
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    (&a * a.transpose() + DMatrix::identity(n, n) * 0.1) * scale
}

fn random_psd3(rng: &mut ChaCha8Rng, scale: f64) -> Mat3 {
    let a = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0) * scale);
    a * a.transpose()
}

fn manifold_round_trip(rng: &mut ChaCha8Rng, _: Corruption) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..ROUND_TRIP_INSTANCES {
        let x = random_state(rng);
        let y = random_state(rng);
        let u = Tangent::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let Ok(back) = x.boxplus(&u).boxminus(&x) else {
            return f64::INFINITY;
        };
        worst = worst.max((back - u).amax());
        let Ok(d) = y.boxminus(&x) else {
            return f64::INFINITY;
        };
        let z = x.boxplus(&d);
        worst = worst.max((z.rot.matrix() - y.rot.matrix()).amax());
        let Ok(rest) = z.boxminus(&y) else {
            return f64::INFINITY;
        };
        worst = worst.max(rest.fixed_rows::<15>(3).amax());
    }
    worst
}

const STEP_DT: f64 = 1e-3;

/// Error-state map of one propagation step, `δx ↦ f(x ⊞ δx) ⊟ f(x)`.
fn step_state_fd(x: &State, u: &ImuSample) -> DMatrix<f64> {
    let nominal = propagate_discrete(x, u, STEP_DT).expect("positive dt");
    central_difference(
        |d| {
            let y = propagate_discrete(&x.boxplus(&Tangent::from_column_slice(d.as_slice())), u, STEP_DT)
                .expect("positive dt");
            to_dvec(&y.boxminus(&nominal).expect("small step"))
        },
        &DVector::zeros(STATE_DIM),
        1e-6,
    )
}

fn step_noise_fd(x: &State, u: &ImuSample) -> DMatrix<f64> {
    let nominal = propagate_discrete(x, u, STEP_DT).expect("positive dt");
    central_difference(
        |w| {
            let n = ProcessNoise::from_vector(&SVector::<f64, NOISE_DIM>::from_column_slice(w.as_slice()));
            let y = propagate_discrete_noisy(x, u, &n, STEP_DT).expect("positive dt");
            to_dvec(&y.boxminus(&nominal).expect("small step"))
        },
        &DVector::zeros(NOISE_DIM),
        1e-6,
    )
}

fn transition_fd(rng: &mut ChaCha8Rng, c: Corruption) -> f64 {
    (0..FD_INSTANCES)
        .map(|_| {
            let x = random_state(rng);
            let u = random_input(rng);
            let (f, _) = transition_jacobians_discrete(&x, &u, STEP_DT, JacobianMode::Exact);
            let f = corrupt_if(c == Corruption::Transition, to_dmat(&f), 1.0 + 1e-3);
            relative_frobenius(&f, &step_state_fd(&x, &u))
        })
        .fold(0.0, f64::max)
}

fn noise_jacobian_fd(rng: &mut ChaCha8Rng, c: Corruption) -> f64 {
    (0..FD_INSTANCES)
        .map(|_| {
            let x = random_state(rng);
            let u = random_input(rng);
            let (_, fw) = transition_jacobians_discrete(&x, &u, STEP_DT, JacobianMode::Exact);
            let fw = corrupt_if(c == Corruption::Transition, to_dmat(&fw), 1.0 + 1e-3);
            relative_frobenius(&fw, &step_noise_fd(&x, &u))
        })
        .fold(0.0, f64::max)
}

fn plane_points(rng: &mut ChaCha8Rng, n: usize, sigma: f64, normal: &Vec3, center: &Vec3) -> Vec<Vec3> {
    let b = normal_tangent_basis(normal);
    (0..n)
        .map(|_| {
            let a = rng.random_range(-1.5..1.5);
            let c = rng.random_range(-0.8..0.8);
            let off: f64 = rng.sample::<f64, _>(StandardNormal) * sigma;
            center + b.column(0) * a + b.column(1) * c + normal * off
        })
        .collect()
}

fn geometric_fit() -> PlaneFitConfig {
    PlaneFitConfig { plane_rms: f64::INFINITY, thickness_ratio: 1.0, ..PlaneFitConfig::default() }
}

fn fitted(points: &[WorldPoint], view: &Vec3, cfg: &PlaneFitConfig) -> Option<PlaneFeature> {
    fit_plane(points, view, cfg).ok()?.plane().copied()
}

fn plane_normal_fd(rng: &mut ChaCha8Rng, c: Corruption) -> f64 {
    let cfg = geometric_fit();
    (0..FD_INSTANCES)
        .map(|_| {
            let normal = so3_exp(&uniform3(rng, 3.0)).rotate(&Vec3::z());
            let center = uniform3(rng, 3.0);
            let pos = plane_points(rng, 25, 0.02, &normal, &center);
            let view = center + normal * 4.0;
            let wps: Vec<WorldPoint> = pos.iter().map(|p| WorldPoint::new(*p, Mat3::zeros())).collect();
            let Some(plane) = fitted(&wps, &view, &cfg) else {
                return f64::INFINITY;
            };
            let Ok(jac) = plane_jacobians(&pos, &plane.eigenvectors, &plane.eigenvalues, &plane.center, cfg.gap_floor)
            else {
                return f64::INFINITY;
            };
            let flat = DVector::from_iterator(pos.len() * 3, pos.iter().flat_map(|p| p.iter().copied()));
            let fd = central_difference(
                |x| {
                    let moved: Vec<WorldPoint> = (0..pos.len())
                        .map(|i| WorldPoint::new(Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]), Mat3::zeros()))
                        .collect();
                    let n = fitted(&moved, &view, &cfg).map_or(Vec3::repeat(f64::NAN), |p| p.normal);
                    to_dvec(&n)
                },
                &flat,
                1e-6,
            );
            let mut an = DMatrix::zeros(3, pos.len() * 3);
            for (i, j) in jac.iter().enumerate() {
                an.view_mut((0, 3 * i), (3, 3)).copy_from(&j.fixed_view::<3, 3>(0, 0));
            }
            let an = corrupt_if(c == Corruption::PlaneNormal, an, 1.0 + 1e-3);
            relative_frobenius(&an, &fd)
        })
        .fold(0.0, f64::max)
}

fn observation_fd(rng: &mut ChaCha8Rng, c: Corruption) -> f64 {
    let ext = Extrinsic::new(so3_exp(&Vec3::new(0.05, -0.1, 0.2)), Vec3::new(0.1, 0.02, -0.05));
    (0..FD_INSTANCES)
        .map(|_| {
            let x = random_state(rng);
            let n = (uniform3(rng, 1.0) + Vec3::new(0.0, 0.0, 1.5)).normalize();
            let plane = PlaneFeature {
                normal: n,
                center: uniform3(rng, 3.0),
                cov: nalgebra::Matrix6::identity() * 1e-6,
                eigenvalues: Vec3::new(1.0, 0.5, 0.0),
                eigenvectors: Mat3::identity(),
                count: 10,
            };
            let lp = LocalPoint { p: uniform3(rng, 5.0), cov: Mat3::identity() * 1e-4 };
            let h = observation_row(&x, &plane, &lp, &ext).h;
            let fd = central_difference(
                |d| {
                    let y = x.boxplus(&Tangent::from_column_slice(d.as_slice()));
                    DVector::from_element(1, observation_row(&y, &plane, &lp, &ext).z)
                },
                &DVector::zeros(STATE_DIM),
                1e-7,
            );
            let an = corrupt_if(c == Corruption::Observation, to_dmat::<1, STATE_DIM>(&h), 1.0 + 1e-3);
            relative_frobenius(&an, &fd)
        })
        .fold(0.0, f64::max)
}

fn prior_jacobian_fd(rng: &mut ChaCha8Rng, c: Corruption) -> f64 {
    (0..FD_INSTANCES)
        .map(|_| {
            let prior = random_state(rng);
            let x = prior.boxplus(&Tangent::from_fn(|_, _| rng.random_range(-0.5..0.5)));
            let Ok(j) = prior_jacobian(&x, &prior) else {
                return f64::INFINITY;
            };
            let fd = central_difference(
                |d| {
                    let y = x.boxplus(&Tangent::from_column_slice(d.as_slice()));
                    to_dvec(&y.boxminus(&prior).expect("small offset"))
                },
                &DVector::zeros(STATE_DIM),
                1e-6,
            );
            let an = corrupt_if(c == Corruption::PriorJacobian, to_dmat(&j), 1.0 + 1e-3);
            relative_frobenius(&an, &fd)
        })
        .fold(0.0, f64::max)
}

/// Largest entrywise difference between the two derivations; exact agreement is required.
fn method_equivalence(rng: &mut ChaCha8Rng, c: Corruption) -> f64 {
    (0..EQUIVALENCE_INSTANCES)
        .map(|_| {
            let x = random_state(rng);
            let u = random_input(rng);
            let dt = rng.random_range(1e-4..0.05);
            let (f1, w1) = transition_jacobians_discrete(&x, &u, dt, JacobianMode::Approximate);
            let (mut f2, w2) = transition_jacobians_ct(&x, &u, dt, JacobianMode::Approximate);
            if c == Corruption::MethodEquivalence {
                f2[(0, 0)] += 1e-12;
            }
            (f1 - f2).amax().max((w1 - w2).amax())
        })
        .fold(0.0, f64::max)
}

fn random_system(rng: &mut ChaCha8Rng, n: usize) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let h = DMatrix::from_fn(n, STATE_DIM, |_, _| rng.random_range(-1.0..1.0));
    let q = DVector::from_fn(n, |_, _| rng.random_range(1e-4..1e-2));
    (h, q, random_spd(rng, STATE_DIM, 1e-3))
}

fn gain_identity(rng: &mut ChaCha8Rng, c: Corruption, n: usize) -> f64 {
    (0..10)
        .map(|_| {
            let (h, q, u) = random_system(rng, n);
            match (kalman_gain_efficient(&h, &q, &u), kalman_gain_naive(&h, &q, &u)) {
                (Ok(ke), Ok(kn)) => relative_frobenius(&corrupt_if(c == Corruption::Gain, ke, 1.0 + 1e-6), &kn),
                _ => f64::INFINITY,
            }
        })
        .fold(0.0, f64::max)
}

/// Iterated update on measurements linear in `x ⊟ x_prior` with the prior projection
/// held at the identity: the fixed point must be the closed-form minimizer of the
/// quadratic objective, reached with a non-increasing objective. A rising objective is
/// reported as an infinite error.
fn linear_map(rng: &mut ChaCha8Rng, c: Corruption) -> f64 {
    let prior = random_state(rng);
    let n = 30;
    let (h, q, _) = random_system(rng, n);
    let p = random_spd(rng, STATE_DIM, 1e-2);
    let b = DVector::from_fn(n, |_, _| rng.random_range(-0.1..0.1));
    let meas_at = |x: &State| -> Vec<Measurement> {
        let d = to_dvec(&x.boxminus(&prior).expect("small offset"));
        let z = &h * d + &b;
        (0..n)
            .map(|i| Measurement { z: z[i], h: ObservationRow::from_iterator(h.row(i).iter().copied()), var: q[i] })
            .collect()
    };
    let belief = PropagatedBelief { t: 0.0, state: prior, cov: Cov::from_column_slice(p.as_slice()) };
    let cfg =
        FilterConfig { prior_jacobian: PriorJacobianMode::Identity, max_iterations: 10, ..FilterConfig::default() };
    let mut visited = Vec::new();
    let mut provider = |x: &State, _: usize| {
        visited.push(*x);
        meas_at(x)
    };
    let Ok(out) = iterate_update(&belief, &mut provider, &cfg) else {
        return f64::INFINITY;
    };
    let qinv = DMatrix::from_diagonal(&q.map(|v| 1.0 / v));
    let Some(pinv) = p.clone().try_inverse() else {
        return f64::INFINITY;
    };
    let normal = pinv + h.transpose() * &qinv * &h;
    let Some(delta) = normal.lu().solve(&(-(h.transpose() * &qinv * &b))) else {
        return f64::INFINITY;
    };
    let mut got = to_dvec(&out.state.boxminus(&prior).expect("small offset"));
    if c == Corruption::Gain {
        got *= 1.0 + 1e-6;
    }
    let objective: Vec<f64> = visited
        .iter()
        .chain(std::iter::once(&out.state))
        .map(|x| map_objective(x, &prior, &belief.cov, &meas_at(x)).unwrap_or(f64::INFINITY))
        .collect();
    if objective.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-12)) {
        return f64::INFINITY;
    }
    (got - delta).amax()
}

fn dmat3(m: &Mat3) -> DMatrix<f64> {
    to_dmat(m)
}

fn scale_cov(c: Corruption, m: DMatrix<f64>) -> DMatrix<f64> {
    corrupt_if(c == Corruption::Covariance, m, 1.5)
}

const MC_SAMPLES: usize = 100_000;

fn local_point_cov_mc(rng: &mut ChaCha8Rng, c: Corruption) -> f64 {
    let (sd, sphi) = (0.02, 0.004);
    let bearing = UnitBearing::new(Vec3::new(0.3, 0.8, -0.4)).expect("nonzero");
    let ray =
        LidarRay { bearing, depth: 6.0, t: 0.0, range_var: sd * sd, bearing_cov: Matrix2::identity() * sphi * sphi };
    let analytic = scale_cov(c, dmat3(&local_point_cov(&ray).cov));
    let draws: Vec<DVector<f64>> = (0..MC_SAMPLES)
        .map(|_| {
            let dd: f64 = rng.sample::<f64, _>(StandardNormal) * sd;
            let dphi = Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * sphi;
            let p = bearing.boxplus(&dphi).as_vec() * (ray.depth + dd);
            to_dvec(&(p - ray.point()))
        })
        .collect();
    relative_frobenius(&sample_covariance(&draws), &analytic)
}

fn world_point_cov_mc(rng: &mut ChaCha8Rng, c: Corruption) -> f64 {
    let lp =
        LocalPoint { p: Vec3::new(3.0, -1.0, 2.0), cov: Mat3::new(4e-4, 1e-4, 0.0, 1e-4, 2e-4, 0.0, 0.0, 0.0, 1e-4) };
    let rot = so3_exp(&Vec3::new(0.3, 0.5, -0.2));
    let trans = Vec3::new(1.0, 2.0, 3.0);
    let sr = Mat3::from_diagonal(&Vec3::new(1e-5, 4e-5, 2e-5));
    let st = Mat3::from_diagonal(&Vec3::new(1e-4, 1e-4, 3e-4));
    let wp = world_point_cov(&lp, &rot, &trans, &sr, &st);
    let samplers = [&lp.cov, &sr, &st].map(|m| GaussianSampler::new(&dmat3(m)));
    let v3 = |d: DVector<f64>| Vec3::new(d[0], d[1], d[2]);
    let draws: Vec<DVector<f64>> = (0..MC_SAMPLES)
        .map(|_| {
            let p = lp.p + v3(samplers[0].sample(rng));
            let r = rot.boxplus(&v3(samplers[1].sample(rng)));
            let t = trans + v3(samplers[2].sample(rng));
            to_dvec(&(r.rotate(&p) + t - wp.p))
        })
        .collect();
    relative_frobenius(&sample_covariance(&draws), &scale_cov(c, dmat3(&wp.cov)))
}

/// Refits a noisy plane; the normal is compared in two tangent coordinates because its
/// covariance is rank-deficient along the normal itself.
fn plane_cov_mc(rng: &mut ChaCha8Rng, c: Corruption) -> f64 {
    let sigma = 0.005;
    let normal = Vec3::new(0.1, 0.2, 1.0).normalize();
    let center = Vec3::new(2.0, -1.0, 0.5);
    let pts: Vec<WorldPoint> = plane_points(rng, 60, sigma, &normal, &center)
        .into_iter()
        .map(|p| WorldPoint::new(p, Mat3::identity() * sigma * sigma))
        .collect();
    let view = center + normal * 4.0;
    let cfg = geometric_fit();
    let Some(base) = fitted(&pts, &view, &cfg) else {
        return f64::INFINITY;
    };
    let noise = Normal::new(0.0, sigma).expect("positive sigma");
    let basis = normal_tangent_basis(&base.normal);
    let mut draws = Vec::with_capacity(10_000);
    for _ in 0..10_000 {
        let moved: Vec<WorldPoint> = pts
            .iter()
            .map(|p| {
                let d = Vec3::new(noise.sample(rng), noise.sample(rng), noise.sample(rng));
                WorldPoint::new(p.p + d, p.cov)
            })
            .collect();
        let Some(f) = fitted(&moved, &view, &cfg) else {
            return f64::INFINITY;
        };
        let dn = basis.transpose() * (f.normal - base.normal);
        let dq = f.center - base.center;
        draws.push(DVector::from_vec(vec![dn[0], dn[1], dq[0], dq[1], dq[2]]));
    }
    let mut t = DMatrix::zeros(5, 6);
    t.view_mut((0, 0), (2, 3)).copy_from(&basis.transpose());
    t.view_mut((2, 3), (3, 3)).copy_from(&Mat3::identity());
    let analytic = &t * scale_cov(c, to_dmat(&base.cov)) * t.transpose();
    relative_frobenius(&sample_covariance(&draws), &analytic)
}

fn residual_variance_mc(rng: &mut ChaCha8Rng, c: Corruption) -> f64 {
    let n0 = Vec3::new(0.2, 0.1, 1.0).normalize();
    let q0 = Vec3::new(0.5, -0.3, 0.0);
    let p0 = Vec3::new(1.5, 0.7, 0.05);
    let a = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-0.01..0.01));
    let cnq = &a * a.transpose();
    let cp = random_psd3(rng, 0.02);
    let plane = PlaneFeature {
        normal: n0,
        center: q0,
        cov: nalgebra::Matrix6::from_column_slice(cnq.as_slice()),
        eigenvalues: Vec3::new(1.0, 0.5, 0.0),
        eigenvectors: Mat3::identity(),
        count: 10,
    };
    let wp = WorldPoint::new(p0, cp);
    let mut analytic = residual_variance(&plane, &wp);
    if c == Corruption::Covariance {
        analytic *= 1.5;
    }
    let s_plane = GaussianSampler::new(&cnq);
    let s_point = GaussianSampler::new(&dmat3(&cp));
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..MC_SAMPLES {
        let a = s_plane.sample(rng);
        let b = s_point.sample(rng);
        let d = residual_value(
            &(n0 + Vec3::new(a[0], a[1], a[2])),
            &(q0 + Vec3::new(a[3], a[4], a[5])),
            &(p0 + Vec3::new(b[0], b[1], b[2])),
        );
        sum += d;
        sum2 += d * d;
    }
    let mean = sum / MC_SAMPLES as f64;
    let var = sum2 / MC_SAMPLES as f64 - mean * mean;
    ((var - analytic) / analytic).abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(corrupt: Corruption) -> VerifyConfig {
        VerifyConfig { seed: 1, corrupt }
    }

    #[test]
    fn names_are_unique() {
        let names = check_names();
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(run_check("no_such_check", &cfg(Corruption::None)).is_none());
    }

    #[test]
    fn cheap_checks_pass_and_catch_their_corruption() {
        let cases = [
            ("transition_fd", Corruption::Transition),
            ("noise_jacobian_fd", Corruption::Transition),
            ("observation_fd", Corruption::Observation),
            ("prior_jacobian_fd", Corruption::PriorJacobian),
            ("method_equivalence", Corruption::MethodEquivalence),
            ("gain_smw_n10", Corruption::Gain),
            ("linear_map", Corruption::Gain),
        ];
        for (name, corruption) in cases {
            let clean = run_check(name, &cfg(Corruption::None)).unwrap();
            assert!(clean.passed, "{}", clean.line());
            let broken = run_check(name, &cfg(corruption)).unwrap();
            assert!(!broken.passed, "{}", broken.line());
            // An unrelated corruption leaves the check alone.
            assert_eq!(run_check(name, &cfg(Corruption::Covariance)).unwrap(), clean);
        }
    }

    #[test]
    fn checks_are_seeded_independently() {
        let a = run_check("gain_smw_n1", &cfg(Corruption::None)).unwrap();
        let b = run_check("gain_smw_n1", &VerifyConfig { seed: 2, corrupt: Corruption::None }).unwrap();
        assert_eq!(a, run_check("gain_smw_n1", &cfg(Corruption::None)).unwrap());
        assert_ne!(a.value, b.value);
    }

    #[test]
    fn render_has_one_row_per_check() {
        let report = VerifyReport { checks: vec![CheckResult::new("a", 0.5, 1.0), CheckResult::new("b", 2.0, 1.0)] };
        let text = report.render();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("check=b status=fail"));
        assert!(text.ends_with("checks=2 passed=1\n"));
        assert!(!report.all_passed());
    }
}
