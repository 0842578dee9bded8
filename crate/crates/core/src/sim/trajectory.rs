//! Analytic ground-truth trajectories with closed-form velocity, acceleration and body rates.

use crate::error::{Error, Result};
use crate::kinematics::Pose;
use crate::manifold::{Mat3, Rotation, Vec3};

/// Path shape, parameterized by warped time `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryKind {
    Rest,
    /// Straight line at constant velocity.
    ConstantVelocity {
        velocity: Vec3,
    },
    /// Horizontal circle heading along the tangent, `radius` m at `rate` rad/s.
    Circular {
        radius: f64,
        rate: f64,
    },
    /// Horizontal lemniscate of half-extents `(ax, ay)` with gentle roll, pitch and yaw
    /// oscillation and a small vertical excursion.
    FigureEight {
        ax: f64,
        ay: f64,
        az: f64,
        rate: f64,
    },
    /// Pure yaw rotation in place at `rate` rad/s.
    Spin {
        rate: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    /// Total length, s.
    pub duration: f64,
    pub imu_rate: f64,
    pub scan_rate: f64,
    pub points_per_scan: usize,
    /// Initial stationary period, s.
    pub rest_time: f64,
    /// Length of the smooth speed-up from rest to the nominal time rate, s.
    pub ramp_time: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            kind: TrajectoryKind::Rest,
            duration: 10.0,
            imu_rate: 200.0,
            scan_rate: 10.0,
            points_per_scan: 2000,
            rest_time: 1.0,
            ramp_time: 2.0,
        }
    }
}

/// Pose and its derivatives at one instant. Velocity and acceleration are in the world
/// frame; the angular rate is in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicSample {
    pub t: f64,
    pub rot: Rotation,
    pub pos: Vec3,
    pub vel: Vec3,
    pub acc: Vec3,
    pub omega: Vec3,
}

impl KinematicSample {
    pub fn pose(&self) -> Pose {
        Pose::new(self.rot, self.pos)
    }
}

/// Value and first two derivatives of a scalar or vector function.
#[derive(Clone, Copy)]
struct Jet<T> {
    v: T,
    d1: T,
    d2: T,
}

fn zyx_rotation(e: &Vec3) -> Mat3 {
    let (sr, cr) = e.x.sin_cos();
    let (sp, cp) = e.y.sin_cos();
    let (sy, cy) = e.z.sin_cos();
    let rz = Mat3::new(cy, -sy, 0.0, sy, cy, 0.0, 0.0, 0.0, 1.0);
    let ry = Mat3::new(cp, 0.0, sp, 0.0, 1.0, 0.0, -sp, 0.0, cp);
    let rx = Mat3::new(1.0, 0.0, 0.0, 0.0, cr, -sr, 0.0, sr, cr);
    rz * ry * rx
}

/// Body rates of `Rz(yaw) Ry(pitch) Rx(roll)` from Euler angle rates `(roll, pitch, yaw)`.
fn zyx_body_rate(e: &Vec3, de: &Vec3) -> Vec3 {
    let (sr, cr) = e.x.sin_cos();
    let (sp, cp) = e.y.sin_cos();
    Vec3::new(de.x - de.z * sp, de.y * cr + de.z * cp * sr, -de.y * sr + de.z * cp * cr)
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.duration, self.imu_rate, self.scan_rate];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("trajectory rates and duration must be positive".into()));
        }
        if self.duration <= 2.0 / self.scan_rate {
            return Err(Error::Config("duration must exceed two scan periods".into()));
        }
        if self.rest_time < 0.0 || self.ramp_time < 0.0 || self.points_per_scan == 0 {
            return Err(Error::Config("rest/ramp must be non-negative and points_per_scan positive".into()));
        }
        Ok(())
    }

    /// Warped time: zero during rest, a quartic blend with matching first and second
    /// derivatives, then unit rate.
    fn warp(&self, t: f64) -> Jet<f64> {
        let t0 = self.rest_time;
        let tr = self.ramp_time;
        if t <= t0 {
            return Jet { v: 0.0, d1: 0.0, d2: 0.0 };
        }
        if t < t0 + tr {
            let u = (t - t0) / tr;
            return Jet {
                v: tr * (u.powi(3) - 0.5 * u.powi(4)),
                d1: 3.0 * u * u - 2.0 * u.powi(3),
                d2: (6.0 * u - 6.0 * u * u) / tr,
            };
        }
        Jet { v: t - t0 - 0.5 * tr, d1: 1.0, d2: 0.0 }
    }

    /// Position and Euler angles as functions of warped time, with derivatives in `s`.
    fn shape(&self, s: f64) -> (Jet<Vec3>, Jet<Vec3>) {
        let zero = Jet { v: Vec3::zeros(), d1: Vec3::zeros(), d2: Vec3::zeros() };
        match self.kind {
            TrajectoryKind::Rest => (zero, zero),
            TrajectoryKind::ConstantVelocity { velocity } => {
                (Jet { v: velocity * s, d1: velocity, d2: Vec3::zeros() }, zero)
            }
            TrajectoryKind::Circular { radius, rate } => {
                let (sn, cs) = (rate * s).sin_cos();
                let pos = Jet {
                    v: Vec3::new(radius * sn, radius * (1.0 - cs), 0.0),
                    d1: Vec3::new(radius * rate * cs, radius * rate * sn, 0.0),
                    d2: Vec3::new(-radius * rate * rate * sn, radius * rate * rate * cs, 0.0),
                };
                let ang = Jet { v: Vec3::new(0.0, 0.0, rate * s), d1: Vec3::new(0.0, 0.0, rate), d2: Vec3::zeros() };
                (pos, ang)
            }
            TrajectoryKind::FigureEight { ax, ay, az, rate } => {
                let w = rate;
                let (s1, c1) = (w * s).sin_cos();
                let (s2, c2) = (2.0 * w * s).sin_cos();
                let pos = Jet {
                    v: Vec3::new(ax * s1, 0.5 * ay * s2, az * s1),
                    d1: Vec3::new(ax * w * c1, ay * w * c2, az * w * c1),
                    d2: Vec3::new(-ax * w * w * s1, -2.0 * ay * w * w * s2, -az * w * w * s1),
                };
                // Roll 0.1 sin(ws), pitch 0.1 sin(2ws), yaw 0.4 sin(ws).
                let ang = Jet {
                    v: Vec3::new(0.1 * s1, 0.1 * s2, 0.4 * s1),
                    d1: Vec3::new(0.1 * w * c1, 0.2 * w * c2, 0.4 * w * c1),
                    d2: Vec3::new(-0.1 * w * w * s1, -0.4 * w * w * s2, -0.4 * w * w * s1),
                };
                (pos, ang)
            }
            TrajectoryKind::Spin { rate } => {
                (zero, Jet { v: Vec3::new(0.0, 0.0, rate * s), d1: Vec3::new(0.0, 0.0, rate), d2: Vec3::zeros() })
            }
        }
    }

    /// Ground-truth kinematics at time `t`.
    pub fn sample(&self, t: f64) -> KinematicSample {
        let w = self.warp(t);
        let (p, e) = self.shape(w.v);
        let de = e.d1 * w.d1;
        KinematicSample {
            t,
            rot: Rotation::from_matrix_unchecked(zyx_rotation(&e.v)),
            pos: p.v,
            vel: p.d1 * w.d1,
            acc: p.d2 * w.d1 * w.d1 + p.d1 * w.d2,
            omega: zyx_body_rate(&e.v, &de),
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        self.sample(t).pose()
    }

    pub fn imu_period(&self) -> f64 {
        1.0 / self.imu_rate
    }

    pub fn scan_period(&self) -> f64 {
        1.0 / self.scan_rate
    }

    /// Number of complete scans inside the duration.
    pub fn scan_count(&self) -> usize {
        (self.duration * self.scan_rate + 1e-9).floor() as usize
    }

    /// End time of scan `k` (1-based: scan `k` covers `((k-1)T, kT]`).
    pub fn scan_end(&self, k: usize) -> f64 {
        k as f64 * self.scan_period()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::vee;
    use approx::assert_relative_eq;

    fn specs() -> Vec<TrajectorySpec> {
        let base = TrajectorySpec::default();
        vec![
            TrajectorySpec { kind: TrajectoryKind::ConstantVelocity { velocity: Vec3::new(0.3, -0.2, 0.1) }, ..base },
            TrajectorySpec { kind: TrajectoryKind::Circular { radius: 1.5, rate: 0.6 }, ..base },
            TrajectorySpec { kind: TrajectoryKind::FigureEight { ax: 1.5, ay: 1.0, az: 0.2, rate: 0.5 }, ..base },
            TrajectorySpec { kind: TrajectoryKind::Spin { rate: 1.0 }, ..base },
        ]
    }

    #[test]
    fn starts_at_rest_at_origin() {
        for spec in specs() {
            let s = spec.sample(0.0);
            assert_eq!(s.pos, Vec3::zeros());
            assert_eq!(s.vel, Vec3::zeros());
            assert_eq!(s.omega, Vec3::zeros());
            assert_eq!(*s.rot.matrix(), Mat3::identity());
        }
    }

    #[test]
    fn derivatives_match_central_differences() {
        let h = 1e-5;
        for spec in specs() {
            for &t in &[0.5, 1.3, 2.2, 2.9, 4.0, 7.7] {
                let s = spec.sample(t);
                let a = spec.sample(t - h);
                let b = spec.sample(t + h);
                assert_relative_eq!(s.vel, (b.pos - a.pos) / (2.0 * h), epsilon = 1e-8);
                assert_relative_eq!(s.acc, (b.vel - a.vel) / (2.0 * h), epsilon = 1e-7);
                // Rᵀ Ṙ = ⌊ω⌋
                let rdot = (b.rot.matrix() - a.rot.matrix()) / (2.0 * h);
                assert_relative_eq!(s.omega, vee(&(s.rot.matrix().transpose() * rdot)), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn circular_steady_state_centripetal() {
        let (r, w) = (1.5, 0.6);
        let spec = TrajectorySpec { kind: TrajectoryKind::Circular { radius: r, rate: w }, ..Default::default() };
        for &t in &[3.5, 5.0, 8.25] {
            let s = spec.sample(t);
            let body = s.rot.matrix().transpose() * s.acc;
            assert_relative_eq!(body.norm(), r * w * w, epsilon = 1e-12);
            // Points to the circle centre, which is the body's left.
            assert_relative_eq!(body, Vec3::new(0.0, r * w * w, 0.0), epsilon = 1e-12);
            assert_relative_eq!(s.omega, Vec3::new(0.0, 0.0, w), epsilon = 1e-12);
        }
    }

    #[test]
    fn warp_is_smooth_at_the_joins() {
        let spec = TrajectorySpec::default();
        for t in [spec.rest_time, spec.rest_time + spec.ramp_time] {
            let a = spec.warp(t - 1e-9);
            let b = spec.warp(t + 1e-9);
            assert!((a.v - b.v).abs() < 1e-8 && (a.d1 - b.d1).abs() < 1e-8 && (a.d2 - b.d2).abs() < 1e-7);
        }
    }

    #[test]
    fn validation() {
        assert!(TrajectorySpec::default().validate().is_ok());
        assert!(TrajectorySpec { duration: 0.15, ..Default::default() }.validate().is_err());
        assert!(TrajectorySpec { imu_rate: 0.0, ..Default::default() }.validate().is_err());
    }
}
