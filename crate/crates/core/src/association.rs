//! Point-to-plane residuals: value, gate variance, and the linearized observation.

use nalgebra::{Matrix6, RowSVector, SMatrix};

use crate::kinematics::{Extrinsic, State, POS, ROT, STATE_DIM};
use crate::manifold::{skew, Mat3, Vec3};
use crate::uncertainty::{LocalPoint, PlaneFeature, WorldPoint};

pub type ObservationRow = RowSVector<f64, STATE_DIM>;

/// One linearized point-to-plane measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    /// Signed distance of the registered point from the plane, m.
    pub z: f64,
    /// Derivative of `z` with respect to the error state.
    pub h: ObservationRow,
    /// Measurement noise variance from the plane and local point covariances, m².
    pub var: f64,
    pub plane: PlaneFeature,
    /// The deskewed sensor-frame point.
    pub point: LocalPoint,
}

/// `nᵀ(p - q)`.
#[inline]
pub fn residual_value(n: &Vec3, q: &Vec3, p: &Vec3) -> f64 {
    n.dot(&(p - q))
}

fn quad_form(j: &SMatrix<f64, 1, 9>, plane_cov: &Matrix6<f64>, point_cov: &Mat3) -> f64 {
    let jp = j.fixed_view::<1, 6>(0, 0);
    let jx = j.fixed_view::<1, 3>(0, 6);
    (jp * plane_cov * jp.transpose())[0] + (jx * point_cov * jx.transpose())[0]
}

/// Variance of the distance of a global point from a plane, with the plane and the
/// point treated as independent: `J diag(Σ_nq, Σ_p) Jᵀ`, `J = [(p - q)ᵀ, -nᵀ, nᵀ]`.
pub fn residual_variance(plane: &PlaneFeature, wp: &WorldPoint) -> f64 {
    let mut j = SMatrix::<f64, 1, 9>::zeros();
    j.fixed_view_mut::<1, 3>(0, 0).copy_from(&(wp.p - plane.center).transpose());
    j.fixed_view_mut::<1, 3>(0, 3).copy_from(&(-plane.normal.transpose()));
    j.fixed_view_mut::<1, 3>(0, 6).copy_from(&plane.normal.transpose());
    quad_form(&j, &plane.cov, &wp.cov).max(0.0)
}

/// Residual, observation row, and measurement variance of a scan-end sensor-frame point
/// against `plane`, evaluated at the state `x`.
pub fn observation_row(x: &State, plane: &PlaneFeature, lp: &LocalPoint, extrinsic: &Extrinsic) -> Residual {
    let n = plane.normal;
    let r = x.rot.matrix();
    let p_imu = extrinsic.apply(&lp.p);
    let p_world = r * p_imu + x.pos;
    let mut h = ObservationRow::zeros();
    h.fixed_view_mut::<1, 3>(0, ROT).copy_from(&(skew(&p_imu) * r.transpose() * n).transpose());
    h.fixed_view_mut::<1, 3>(0, POS).copy_from(&n.transpose());

    let mut j = SMatrix::<f64, 1, 9>::zeros();
    j.fixed_view_mut::<1, 3>(0, 0).copy_from(&(p_world - plane.center).transpose());
    j.fixed_view_mut::<1, 3>(0, 3).copy_from(&(-n.transpose()));
    j.fixed_view_mut::<1, 3>(0, 6).copy_from(&(n.transpose() * r * extrinsic.rot.matrix()));
    Residual {
        z: residual_value(&n, &plane.center, &p_world),
        h,
        var: quad_form(&j, &plane.cov, &lp.cov),
        plane: *plane,
        point: *lp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::Tangent;
    use crate::manifold::so3_exp;
    use crate::sim::oracles::{central_difference, GaussianSampler};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(n: Vec3, q: Vec3, cov: Matrix6<f64>) -> PlaneFeature {
        PlaneFeature {
            normal: n.normalize(),
            center: q,
            cov,
            eigenvalues: Vec3::new(1.0, 0.5, 0.0),
            eigenvectors: Mat3::identity(),
            count: 10,
        }
    }

    fn random_psd<const D: usize>(rng: &mut ChaCha8Rng, scale: f64) -> SMatrix<f64, D, D> {
        let a = SMatrix::<f64, D, D>::from_fn(|_, _| rng.random_range(-1.0..1.0) * scale);
        a * a.transpose()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(residual_value(&Vec3::z(), &Vec3::zeros(), &Vec3::new(1.0, 2.0, 3.0)), 3.0);
        let n = Vec3::new(1.0, 1.0, 0.0).normalize();
        assert_eq!(residual_value(&n, &Vec3::new(1.0, 0.0, 0.0), &Vec3::new(0.0, 1.0, 5.0)), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = Vec3::new(rng.random(), rng.random(), rng.random()).normalize();
            let q = Vec3::new(rng.random(), rng.random(), rng.random());
            let p = Vec3::new(rng.random(), rng.random(), rng.random());
            let direct = n[0] * (p[0] - q[0]) + n[1] * (p[1] - q[1]) + n[2] * (p[2] - q[2]);
            assert_relative_eq!(residual_value(&n, &q, &p), direct, epsilon = 1e-15);
        }
    }

    #[test]
    fn variance_special_cases() {
        let pl = plane(Vec3::new(0.3, -0.2, 0.9), Vec3::zeros(), Matrix6::zeros());
        let wp = WorldPoint::new(Vec3::new(1.0, 2.0, 0.5), Mat3::zeros());
        assert_eq!(residual_variance(&pl, &wp), 0.0);
        let wp = WorldPoint::new(wp.p, Mat3::identity() * 4e-4);
        assert_relative_eq!(residual_variance(&pl, &wp), 4e-4, epsilon = 1e-18);
    }

    #[test]
    fn variance_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n0 = Vec3::new(0.2, 0.1, 1.0).normalize();
        let q0 = Vec3::new(0.5, -0.3, 0.0);
        let p0 = Vec3::new(1.5, 0.7, 0.05);
        let cnq = random_psd::<6>(&mut rng, 0.01);
        let cp = random_psd::<3>(&mut rng, 0.02);
        let pl = plane(n0, q0, cnq);
        let wp = WorldPoint::new(p0, cp);
        let analytic = residual_variance(&pl, &wp);
        let s1 = GaussianSampler::new(&DMatrix::from_column_slice(6, 6, cnq.as_slice()));
        let s2 = GaussianSampler::new(&DMatrix::from_column_slice(3, 3, cp.as_slice()));
        let n_samples = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n_samples {
            let a = s1.sample(&mut rng);
            let b = s2.sample(&mut rng);
            let d = residual_value(
                &(pl.normal + Vec3::new(a[0], a[1], a[2])),
                &(q0 + Vec3::new(a[3], a[4], a[5])),
                &(p0 + Vec3::new(b[0], b[1], b[2])),
            );
            sum += d;
            sum2 += d * d;
        }
        let mean = sum / n_samples as f64;
        let var = sum2 / n_samples as f64 - mean * mean;
        assert!((var - analytic).abs() / analytic < 0.10, "{var} vs {analytic}");
    }

    #[test]
    fn observation_row_structure_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ext = Extrinsic::new(so3_exp(&Vec3::new(0.05, -0.1, 0.2)), Vec3::new(0.1, 0.02, -0.05));
        for _ in 0..100 {
            let x = State {
                rot: so3_exp(&Vec3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                )),
                pos: Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), 0.0),
                ..State::default()
            };
            let pl = plane(
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0),
                Vec3::new(1.0, 2.0, 3.0),
                random_psd::<6>(&mut rng, 0.01),
            );
            let lp = LocalPoint {
                p: Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-2.0..2.0)),
                cov: random_psd::<3>(&mut rng, 0.02),
            };
            let res = observation_row(&x, &pl, &lp, &ext);
            assert!(res.h.columns(6, 12).iter().all(|v| *v == 0.0));
            assert_eq!(res.h.fixed_view::<1, 3>(0, POS).transpose(), pl.normal);
            assert!(res.var > 0.0);
            let fd = central_difference(
                |d| {
                    let y = x.boxplus(&Tangent::from_column_slice(d.as_slice()));
                    DVector::from_element(1, observation_row(&y, &pl, &lp, &ext).z)
                },
                &DVector::zeros(STATE_DIM),
                1e-7,
            );
            let h = DMatrix::from_row_slice(1, STATE_DIM, res.h.as_slice());
            assert!((&fd - &h).norm() <= 1e-5 * h.norm(), "{}", (&fd - &h).norm() / h.norm());
        }
    }

    proptest! {
        #[test]
        fn variance_never_negative(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pl = plane(Vec3::new(rng.random(), rng.random(), 1.0), Vec3::zeros(), random_psd::<6>(&mut rng, 0.1));
            let wp = WorldPoint::new(Vec3::new(rng.random(), rng.random(), rng.random()) * 10.0, random_psd::<3>(&mut rng, 0.1));
            prop_assert!(residual_variance(&pl, &wp) >= 0.0);
        }
    }
}
