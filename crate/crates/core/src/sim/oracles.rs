//! Brute-force reference computations used to check the analytic code paths:
//! truncated power series, central finite differences, Monte-Carlo covariance, RK4, and a
//! Kolmogorov-Smirnov normality test.

use nalgebra::{DMatrix, DVector, Matrix3};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::kinematics::State;
use crate::manifold::{skew, Mat3, Rotation, Vec3};

/// `Σ_{k<terms} Aᵏ / k!`.
pub fn matrix_exp_series(a: &Matrix3<f64>, terms: usize) -> Matrix3<f64> {
    let mut sum = Matrix3::identity();
    let mut term = Matrix3::identity();
    for k in 1..terms {
        term = term * a / k as f64;
        sum += term;
    }
    sum
}

/// Central-difference Jacobian of `f` at `x`.
pub fn central_difference<F>(f: F, x: &DVector<f64>, eps: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += eps;
        xm[k] -= eps;
        let col = (f(&xp) - f(&xm)) / (2.0 * eps);
        jac.set_column(k, &col);
    }
    jac
}

/// Unbiased sample covariance of equally sized vectors.
pub fn sample_covariance(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let n = samples.len();
    let d = samples[0].len();
    let mean = samples.iter().fold(DVector::zeros(d), |acc, s| acc + s) / n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = s - &mean;
        cov += &c * c.transpose();
    }
    cov / (n as f64 - 1.0)
}

/// Draws from `N(0, cov)` using a symmetric square root, so rank-deficient
/// covariances are accepted.
pub struct GaussianSampler {
    root: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(cov: &DMatrix<f64>) -> Self {
        let sym = (cov + cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let root = &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals);
        GaussianSampler { root }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.root.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.root * z
    }
}

/// Relative Frobenius distance `‖a - b‖ / ‖b‖`.
pub fn relative_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// A time-varying IMU input for the continuous-time model.
pub struct ContinuousInput {
    f: Box<dyn Fn(f64) -> (Vec3, Vec3) + Send + Sync>,
}

impl ContinuousInput {
    pub fn constant(gyro: Vec3, acc: Vec3) -> Self {
        ContinuousInput { f: Box::new(move |_| (gyro, acc)) }
    }

    pub fn from_fn<F: Fn(f64) -> (Vec3, Vec3) + Send + Sync + 'static>(f: F) -> Self {
        ContinuousInput { f: Box::new(f) }
    }

    pub fn gyro(&self, t: f64) -> Vec3 {
        (self.f)(t).0
    }

    pub fn acc(&self, t: f64) -> Vec3 {
        (self.f)(t).1
    }
}

#[derive(Clone, Copy)]
struct Flow {
    rot: Mat3,
    pos: Vec3,
    vel: Vec3,
}

fn flow_rate(x: &Flow, s: &State, gyro: Vec3, acc: Vec3) -> Flow {
    Flow { rot: x.rot * skew(&(gyro - s.bg)), pos: x.vel, vel: x.rot * (acc - s.ba) + s.grav }
}

fn flow_add(x: &Flow, k: &Flow, h: f64) -> Flow {
    Flow { rot: x.rot + k.rot * h, pos: x.pos + k.pos * h, vel: x.vel + k.vel * h }
}

/// One classical Runge-Kutta step of the continuous kinematics from `t` to `t + h`.
/// Biases and gravity are held constant; the attitude is re-projected onto SO(3).
pub fn rk4_step(x: &State, input: &ContinuousInput, t: f64, h: f64) -> State {
    let y = Flow { rot: *x.rot.matrix(), pos: x.pos, vel: x.vel };
    let eval = |y: &Flow, t: f64| {
        let (g, a) = (input.f)(t);
        flow_rate(y, x, g, a)
    };
    let k1 = eval(&y, t);
    let k2 = eval(&flow_add(&y, &k1, 0.5 * h), t + 0.5 * h);
    let k3 = eval(&flow_add(&y, &k2, 0.5 * h), t + 0.5 * h);
    let k4 = eval(&flow_add(&y, &k3, h), t + h);
    let rot = y.rot + (k1.rot + 2.0 * k2.rot + 2.0 * k3.rot + k4.rot) * (h / 6.0);
    State {
        rot: Rotation::from_matrix_projected(&rot),
        pos: y.pos + (k1.pos + 2.0 * k2.pos + 2.0 * k3.pos + k4.pos) * (h / 6.0),
        vel: y.vel + (k1.vel + 2.0 * k2.vel + 2.0 * k3.vel + k4.vel) * (h / 6.0),
        ..*x
    }
}

/// Integrates the continuous model over `[t0, t0 + horizon]` with `steps` RK4 steps.
pub fn rk4_integrate(x: &State, input: &ContinuousInput, t0: f64, horizon: f64, steps: usize) -> State {
    let h = horizon / steps as f64;
    let mut y = *x;
    for i in 0..steps {
        y = rk4_step(&y, input, t0 + i as f64 * h, h);
    }
    y
}

/// Standard normal CDF via the complementary error function (absolute error below 1.2e-7).
pub fn normal_cdf(x: f64) -> f64 {
    let z = x.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.265_512_23
        + t * (1.000_023_68
            + t * (0.374_091_96
                + t * (0.096_784_18
                    + t * (-0.186_288_06
                        + t * (0.278_868_07
                            + t * (-1.135_203_98 + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77))))))));
    let erfc = t * poly.exp();
    if x >= 0.0 {
        1.0 - 0.5 * erfc
    } else {
        0.5 * erfc
    }
}

/// p-value of the one-sample Kolmogorov-Smirnov test of `samples` against N(0, 1).
pub fn ks_normal_pvalue(samples: &[f64]) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let f = normal_cdf(*x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn normal_cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.959_963_985) - 0.975).abs() < 2e-7);
        assert!((normal_cdf(-1.0) - 0.158_655_254).abs() < 2e-7);
    }

    #[test]
    fn ks_accepts_normal_and_rejects_uniform() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let normal: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        assert!(ks_normal_pvalue(&normal) > 0.01);
        // Uniform with unit variance.
        let uniform: Vec<f64> = (0..10_000).map(|_| (rng.random::<f64>() - 0.5) * 12f64.sqrt()).collect();
        assert!(ks_normal_pvalue(&uniform) < 1e-6);
        let scaled: Vec<f64> = normal.iter().map(|x| x * 1.1).collect();
        assert!(ks_normal_pvalue(&scaled) < 0.01);
    }

    #[test]
    fn series_of_zero_is_identity() {
        assert_eq!(matrix_exp_series(&Matrix3::zeros(), 20), Matrix3::identity());
    }

    #[test]
    fn central_difference_of_quadratic() {
        let f = |x: &DVector<f64>| DVector::from_vec(vec![x[0] * x[0] + x[1], 3.0 * x[1]]);
        let j = central_difference(f, &DVector::from_vec(vec![2.0, -1.0]), 1e-5);
        let want = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 0.0, 3.0]);
        assert!((j - want).amax() < 1e-8);
    }

    #[test]
    fn gaussian_sampler_reproduces_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = GaussianSampler::new(&cov);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<_> = (0..50_000).map(|_| s.sample(&mut rng)).collect();
        assert!(relative_frobenius(&sample_covariance(&draws), &cov) < 0.03);
    }
}
