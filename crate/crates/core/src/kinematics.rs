//! The 18-dimensional navigation state, the IMU-driven process model, and its
//! discrete propagation step.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::manifold::{Rotation, Vec3};

pub const STATE_DIM: usize = 18;
pub const NOISE_DIM: usize = 12;

/// Offsets of each block inside the 18-dimensional tangent vector.
pub const ROT: usize = 0;
pub const POS: usize = 3;
pub const VEL: usize = 6;
pub const BG: usize = 9;
pub const BA: usize = 12;
pub const GRAV: usize = 15;

/// Offsets of each block inside the 12-dimensional noise vector.
pub const N_GYRO: usize = 0;
pub const N_ACC: usize = 3;
pub const N_BG: usize = 6;
pub const N_BA: usize = 9;

pub type Tangent = SVector<f64, STATE_DIM>;
pub type Cov = SMatrix<f64, STATE_DIM, STATE_DIM>;
pub type NoiseCov = SMatrix<f64, NOISE_DIM, NOISE_DIM>;

/// Attitude, position, velocity, gyro bias, accel bias, and gravity, all in the global frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State {
    pub rot: Rotation,
    pub pos: Vec3,
    pub vel: Vec3,
    pub bg: Vec3,
    pub ba: Vec3,
    pub grav: Vec3,
}

impl Default for State {
    fn default() -> Self {
        State {
            rot: Rotation::identity(),
            pos: Vec3::zeros(),
            vel: Vec3::zeros(),
            bg: Vec3::zeros(),
            ba: Vec3::zeros(),
            grav: Vec3::new(0.0, 0.0, -crate::GRAVITY),
        }
    }
}

#[inline]
pub(crate) fn block(u: &Tangent, at: usize) -> Vec3 {
    Vec3::new(u[at], u[at + 1], u[at + 2])
}

impl State {
    pub fn boxplus(&self, u: &Tangent) -> State {
        State {
            rot: self.rot.boxplus(&block(u, ROT)),
            pos: self.pos + block(u, POS),
            vel: self.vel + block(u, VEL),
            bg: self.bg + block(u, BG),
            ba: self.ba + block(u, BA),
            grav: self.grav + block(u, GRAV),
        }
    }

    /// `self ⊟ other`.
    pub fn boxminus(&self, other: &State) -> Result<Tangent> {
        let mut out = Tangent::zeros();
        out.fixed_rows_mut::<3>(ROT).copy_from(&self.rot.boxminus(&other.rot)?);
        out.fixed_rows_mut::<3>(POS).copy_from(&(self.pos - other.pos));
        out.fixed_rows_mut::<3>(VEL).copy_from(&(self.vel - other.vel));
        out.fixed_rows_mut::<3>(BG).copy_from(&(self.bg - other.bg));
        out.fixed_rows_mut::<3>(BA).copy_from(&(self.ba - other.ba));
        out.fixed_rows_mut::<3>(GRAV).copy_from(&(self.grav - other.grav));
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        let f = |v: &Vec3| v.iter().all(|x| x.is_finite());
        self.rot.matrix().iter().all(|x| x.is_finite())
            && f(&self.pos)
            && f(&self.vel)
            && f(&self.bg)
            && f(&self.ba)
            && f(&self.grav)
    }

    pub fn pose(&self) -> Pose {
        Pose { rot: self.rot, trans: self.pos }
    }

    /// Initial state from a stationary IMU segment: identity attitude, zero velocity and
    /// biases, gravity from the negated mean specific force of the first `window` samples.
    pub fn from_stationary(samples: &[ImuSample], window: usize) -> Result<State> {
        let n = window.min(samples.len());
        if n == 0 {
            return Err(Error::EmptyImuSpan);
        }
        let mean = samples[..n].iter().map(|s| s.acc).sum::<Vec3>() / n as f64;
        Ok(State { grav: -mean, ..State::default() })
    }
}

/// A rigid transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose {
    pub rot: Rotation,
    pub trans: Vec3,
}

impl Pose {
    pub fn new(rot: Rotation, trans: Vec3) -> Self {
        Pose { rot, trans }
    }

    #[inline]
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rot.rotate(p) + self.trans
    }

    #[inline]
    pub fn apply_inverse(&self, p: &Vec3) -> Vec3 {
        self.rot.matrix().transpose() * (p - self.trans)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose { rot: self.rot * other.rot, trans: self.apply(&other.trans) }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rot.transpose();
        Pose { rot: rt, trans: -(rt.rotate(&self.trans)) }
    }
}

/// LiDAR-to-IMU extrinsic: maps LiDAR-frame points into the IMU frame.
pub type Extrinsic = Pose;

/// One gyroscope and accelerometer reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vec3,
    pub acc: Vec3,
}

impl ImuSample {
    pub fn new(t: f64, gyro: Vec3, acc: Vec3) -> Self {
        ImuSample { t, gyro, acc }
    }

    /// Linear interpolation between two samples at time `t`.
    pub fn lerp(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
        let span = b.t - a.t;
        let s = if span > 0.0 { (t - a.t) / span } else { 0.0 };
        ImuSample { t, gyro: a.gyro + (b.gyro - a.gyro) * s, acc: a.acc + (b.acc - a.acc) * s }
    }
}

/// A realization of the process noise: gyro and accel white noise plus bias increments.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProcessNoise {
    pub gyro: Vec3,
    pub acc: Vec3,
    pub gyro_bias: Vec3,
    pub acc_bias: Vec3,
}

impl ProcessNoise {
    pub fn from_vector(w: &SVector<f64, NOISE_DIM>) -> Self {
        ProcessNoise {
            gyro: Vec3::new(w[N_GYRO], w[N_GYRO + 1], w[N_GYRO + 2]),
            acc: Vec3::new(w[N_ACC], w[N_ACC + 1], w[N_ACC + 2]),
            gyro_bias: Vec3::new(w[N_BG], w[N_BG + 1], w[N_BG + 2]),
            acc_bias: Vec3::new(w[N_BA], w[N_BA + 1], w[N_BA + 2]),
        }
    }
}

/// Continuous-time IMU noise densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuNoiseDensity {
    /// rad/s/√Hz
    pub gyro: f64,
    /// m/s²/√Hz
    pub acc: f64,
    /// rad/s²/√Hz
    pub gyro_walk: f64,
    /// m/s³/√Hz
    pub acc_walk: f64,
}

impl Default for ImuNoiseDensity {
    fn default() -> Self {
        ImuNoiseDensity { gyro: 1.0e-3, acc: 1.0e-2, gyro_walk: 1.0e-5, acc_walk: 1.0e-4 }
    }
}

impl ImuNoiseDensity {
    /// Diagonal covariance of the per-sample noise vector at sampling period `dt`.
    ///
    /// White noise held over one period has variance `density² / dt`; the bias rows
    /// are multiplied by `dt` in the transition, so their variance is `walk² / dt` as well.
    pub fn covariance(&self, dt: f64) -> NoiseCov {
        let mut q = NoiseCov::zeros();
        let vals = [(N_GYRO, self.gyro), (N_ACC, self.acc), (N_BG, self.gyro_walk), (N_BA, self.acc_walk)];
        for (at, density) in vals {
            for i in 0..3 {
                q[(at + i, at + i)] = density * density / dt;
            }
        }
        q
    }
}

/// The process function: `[ω−b_ω−n_ω; v; R(a−b_a−n_a)+g; n_bω; n_ba; 0]`.
pub fn process_f(x: &State, u: &ImuSample, w: &ProcessNoise) -> Tangent {
    let mut f = Tangent::zeros();
    f.fixed_rows_mut::<3>(ROT).copy_from(&(u.gyro - x.bg - w.gyro));
    f.fixed_rows_mut::<3>(POS).copy_from(&x.vel);
    f.fixed_rows_mut::<3>(VEL).copy_from(&(x.rot.rotate(&(u.acc - x.ba - w.acc)) + x.grav));
    f.fixed_rows_mut::<3>(BG).copy_from(&w.gyro_bias);
    f.fixed_rows_mut::<3>(BA).copy_from(&w.acc_bias);
    f
}

/// One noise-free discrete step `x ⊞ (dt · f(x, u, 0))`.
pub fn propagate_discrete(x: &State, u: &ImuSample, dt: f64) -> Result<State> {
    propagate_discrete_noisy(x, u, &ProcessNoise::default(), dt)
}

/// Discrete step with an explicit noise realization.
pub fn propagate_discrete_noisy(x: &State, u: &ImuSample, w: &ProcessNoise, dt: f64) -> Result<State> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::NonPositiveDt(dt));
    }
    Ok(x.boxplus(&(process_f(x, u, w) * dt)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::so3_exp;
    use crate::sim::oracles::{rk4_step, ContinuousInput};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rest_state() -> State {
        State::default()
    }

    fn sample_state(seed: u64) -> State {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut v = || Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        State {
            rot: so3_exp(&v()),
            pos: v() * 5.0,
            vel: v(),
            bg: v() * 0.01,
            ba: v() * 0.1,
            grav: Vec3::new(0.0, 0.0, -9.81) + v() * 0.05,
        }
    }

    #[test]
    fn static_equilibrium_has_zero_rate() {
        let u = ImuSample::new(0.0, Vec3::zeros(), Vec3::new(0.0, 0.0, 9.81));
        let f = process_f(&rest_state(), &u, &ProcessNoise::default());
        assert!(f.amax() < 1e-15);
        let next = propagate_discrete(&rest_state(), &u, 0.01).unwrap();
        assert!(next.boxminus(&rest_state()).unwrap().amax() < 1e-12);
    }

    #[test]
    fn position_rate_is_velocity() {
        let x = State { vel: Vec3::new(1.0, 2.0, 3.0), ..rest_state() };
        let f = process_f(&x, &ImuSample::new(0.0, Vec3::zeros(), Vec3::zeros()), &ProcessNoise::default());
        assert_eq!(block(&f, POS), Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn velocity_rate_recomputed_term_by_term() {
        for seed in 0..20 {
            let x = sample_state(seed);
            let u = ImuSample::new(0.0, Vec3::new(0.1, -0.3, 0.2), Vec3::new(0.4, 0.1, 9.7));
            let w = ProcessNoise {
                gyro: Vec3::new(0.01, 0.0, -0.02),
                acc: Vec3::new(-0.1, 0.05, 0.2),
                gyro_bias: Vec3::new(1e-4, 0.0, 0.0),
                acc_bias: Vec3::new(0.0, -1e-3, 0.0),
            };
            let f = process_f(&x, &u, &w);
            let m = x.rot.matrix();
            let a = u.acc - x.ba - w.acc;
            for i in 0..3 {
                let expected = m[(i, 0)] * a[0] + m[(i, 1)] * a[1] + m[(i, 2)] * a[2] + x.grav[i];
                assert_relative_eq!(f[VEL + i], expected, epsilon = 1e-13);
            }
            assert_eq!(block(&f, BG), w.gyro_bias);
            assert_eq!(block(&f, GRAV), Vec3::zeros());
        }
    }

    #[test]
    fn pure_rotation_step() {
        let u = ImuSample::new(0.0, Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 9.81));
        let x0 = State { rot: so3_exp(&Vec3::new(0.2, 0.1, -0.4)), ..rest_state() };
        let x1 = propagate_discrete(&x0, &u, 0.1).unwrap();
        let expected = x0.rot * so3_exp(&Vec3::new(0.0, 0.0, 0.1));
        assert_relative_eq!(*x1.rot.matrix(), *expected.matrix(), epsilon = 1e-15);
    }

    #[test]
    fn non_positive_dt_rejected() {
        let u = ImuSample::new(0.0, Vec3::zeros(), Vec3::zeros());
        assert_eq!(propagate_discrete(&rest_state(), &u, 0.0), Err(Error::NonPositiveDt(0.0)));
        assert!(propagate_discrete(&rest_state(), &u, -1e-3).is_err());
    }

    #[test]
    fn single_step_agrees_with_rk4_to_second_order() {
        let u = ImuSample::new(0.0, Vec3::new(0.5, -0.2, 0.8), Vec3::new(1.0, 0.3, 9.0));
        let input = ContinuousInput::constant(u.gyro, u.acc);
        let mut errs = Vec::new();
        for dt in [1e-3, 5e-4] {
            let x0 = sample_state(7);
            let euler = propagate_discrete(&x0, &u, dt).unwrap();
            let rk = rk4_step(&x0, &input, 0.0, dt);
            let err = euler.boxminus(&rk).unwrap().norm();
            assert!(err < 10.0 * dt * dt, "dt={dt} err={err}");
            errs.push(err);
        }
        // Local error is second order: halving dt quarters it.
        let ratio = errs[0] / errs[1];
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn substeps_converge_to_rk4_at_first_order() {
        let input = ContinuousInput::constant(Vec3::new(0.3, 0.4, -0.5), Vec3::new(0.5, -0.2, 9.5));
        let x0 = sample_state(3);
        let horizon = 0.2;
        let mut reference = x0;
        let fine = 2000;
        for i in 0..fine {
            let h = horizon / fine as f64;
            reference = rk4_step(&reference, &input, i as f64 * h, h);
        }
        let mut errs = Vec::new();
        for k in [50usize, 100, 200] {
            let h = horizon / k as f64;
            let u = ImuSample::new(0.0, input.gyro(0.0), input.acc(0.0));
            let mut x = x0;
            for _ in 0..k {
                x = propagate_discrete(&x, &u, h).unwrap();
            }
            errs.push(x.boxminus(&reference).unwrap().norm());
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn initial_state_from_stationary_window() {
        let samples: Vec<_> =
            (0..150).map(|i| ImuSample::new(i as f64 * 0.005, Vec3::zeros(), Vec3::new(0.1, 0.0, 9.8))).collect();
        let x = State::from_stationary(&samples, 100).unwrap();
        assert_relative_eq!(x.grav, Vec3::new(-0.1, 0.0, -9.8), epsilon = 1e-12);
        assert_eq!(x.vel, Vec3::zeros());
        assert!(State::from_stationary(&[], 100).is_err());
    }

    proptest! {
        #[test]
        fn biases_and_gravity_constant_without_noise(seed in 0u64..1000, dt in 1e-4..0.05f64) {
            let x = sample_state(seed);
            let u = ImuSample::new(0.0, Vec3::new(0.2, 0.1, -0.3), Vec3::new(0.0, 1.0, 9.0));
            let y = propagate_discrete(&x, &u, dt).unwrap();
            prop_assert_eq!(y.bg, x.bg);
            prop_assert_eq!(y.ba, x.ba);
            prop_assert_eq!(y.grav, x.grav);
            prop_assert_eq!(y.pos, x.pos + x.vel * dt);
        }

        #[test]
        fn state_round_trip(seed in 0u64..1000, s2 in 0u64..1000) {
            let x = sample_state(seed);
            let y = sample_state(s2 + 5000);
            if let Ok(d) = y.boxminus(&x) {
                let back = x.boxplus(&d);
                prop_assert!((back.rot.matrix() - y.rot.matrix()).amax() < 1e-10);
                prop_assert!((back.pos - y.pos).amax() < 1e-10);
            }
        }
    }
}
