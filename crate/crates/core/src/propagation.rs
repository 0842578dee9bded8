//! State and covariance propagation between scans, and backward propagation of the
//! relative motion used to undistort the points of a scan.

use nalgebra::SMatrix;

use crate::error::{Error, Result};
use crate::kinematics::{
    propagate_discrete, Cov, Extrinsic, ImuSample, NoiseCov, Pose, State, BA, BG, GRAV, N_ACC, N_BA, N_BG, N_GYRO, POS,
    ROT, STATE_DIM, VEL,
};
use crate::manifold::{left_jacobian, skew, so3_exp, vee, Mat3, Rotation, Vec3};
use crate::uncertainty::{LidarRay, LocalPoint};

pub type NoiseJacobian = SMatrix<f64, STATE_DIM, 12>;

/// Belief after propagation, stamped with the time it refers to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagatedBelief {
    pub t: f64,
    pub state: State,
    pub cov: Cov,
}

/// How the gyro-bias and gyro-noise columns of the rotation row are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JacobianMode {
    /// Replace the right Jacobian of the step rotation by the identity.
    #[default]
    Approximate,
    /// Keep the right Jacobian `J_l(Δt ω̂)ᵀ`.
    Exact,
}

/// Pose of the IMU at a point's capture time relative to the IMU at scan end,
/// and the velocity at that time in the scan-end IMU frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeMotion {
    pub rot: Rotation,
    pub trans: Vec3,
    pub vel: Vec3,
    pub t: f64,
}

impl RelativeMotion {
    pub fn identity(t: f64) -> Self {
        RelativeMotion { rot: Rotation::identity(), trans: Vec3::zeros(), vel: Vec3::zeros(), t }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rot, self.trans)
    }
}

/// One LiDAR scan with the IMU samples that bracket it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanBundle {
    /// Scan-end time, the time the state update refers to.
    pub t_end: f64,
    /// Returns with capture times no later than `t_end`.
    pub points: Vec<LidarRay>,
    /// IMU samples covering the capture times, starting at or before the earliest one.
    pub imu: Vec<ImuSample>,
}

fn rotation_bias_block(w: &Vec3, dt: f64, mode: JacobianMode) -> Mat3 {
    match mode {
        JacobianMode::Approximate => -Mat3::identity() * dt,
        JacobianMode::Exact => -(left_jacobian(&(w * dt)).transpose() * dt),
    }
}

/// Transition Jacobians obtained by differentiating one discrete step with respect
/// to the error state and the noise.
pub fn transition_jacobians_discrete(x: &State, u: &ImuSample, dt: f64, mode: JacobianMode) -> (Cov, NoiseJacobian) {
    let w = u.gyro - x.bg;
    let a = u.acc - x.ba;
    let r = x.rot.matrix();
    let eye = Mat3::identity();
    let jb = rotation_bias_block(&w, dt, mode);

    let mut f = Cov::identity();
    f.fixed_view_mut::<3, 3>(ROT, ROT).copy_from(so3_exp(&(-w * dt)).matrix());
    f.fixed_view_mut::<3, 3>(ROT, BG).copy_from(&jb);
    f.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&(eye * dt));
    f.fixed_view_mut::<3, 3>(VEL, ROT).copy_from(&(-(r * skew(&a)) * dt));
    f.fixed_view_mut::<3, 3>(VEL, BA).copy_from(&(-r * dt));
    f.fixed_view_mut::<3, 3>(VEL, GRAV).copy_from(&(eye * dt));

    let mut fw = NoiseJacobian::zeros();
    fw.fixed_view_mut::<3, 3>(ROT, N_GYRO).copy_from(&jb);
    fw.fixed_view_mut::<3, 3>(VEL, N_ACC).copy_from(&(-r * dt));
    fw.fixed_view_mut::<3, 3>(BG, N_BG).copy_from(&(eye * dt));
    fw.fixed_view_mut::<3, 3>(BA, N_BA).copy_from(&(eye * dt));
    (f, fw)
}

/// Transition Jacobians obtained from the continuous-time error dynamics
/// `δẋ = A δx + B w`, discretized over `dt`.
pub fn transition_jacobians_ct(x: &State, u: &ImuSample, dt: f64, mode: JacobianMode) -> (Cov, NoiseJacobian) {
    let w = u.gyro - x.bg;
    let a = u.acc - x.ba;
    let r = x.rot.matrix();
    let eye = Mat3::identity();

    let mut am = Cov::zeros();
    am.fixed_view_mut::<3, 3>(ROT, ROT).copy_from(&(-skew(&w)));
    am.fixed_view_mut::<3, 3>(ROT, BG).copy_from(&(-eye));
    am.fixed_view_mut::<3, 3>(POS, VEL).copy_from(&eye);
    am.fixed_view_mut::<3, 3>(VEL, ROT).copy_from(&(-(r * skew(&a))));
    am.fixed_view_mut::<3, 3>(VEL, BA).copy_from(&(-r));
    am.fixed_view_mut::<3, 3>(VEL, GRAV).copy_from(&eye);

    let mut bm = NoiseJacobian::zeros();
    bm.fixed_view_mut::<3, 3>(ROT, N_GYRO).copy_from(&(-eye));
    bm.fixed_view_mut::<3, 3>(VEL, N_ACC).copy_from(&(-r));
    bm.fixed_view_mut::<3, 3>(BG, N_BG).copy_from(&eye);
    bm.fixed_view_mut::<3, 3>(BA, N_BA).copy_from(&eye);

    // First-order discretization everywhere except the attitude block, which is
    // integrated exactly as a matrix exponential.
    let mut f = Cov::identity() + am * dt;
    let att: Mat3 = am.fixed_view::<3, 3>(ROT, ROT) * dt;
    f.fixed_view_mut::<3, 3>(ROT, ROT).copy_from(so3_exp(&vee(&att)).matrix());
    let mut fw = bm * dt;
    if mode == JacobianMode::Exact {
        // ∫₀^Δt Exp(-ω̂ s) ds = J_l(-ω̂Δt) Δt
        let integral = left_jacobian(&(-w * dt)) * dt;
        f.fixed_view_mut::<3, 3>(ROT, BG).copy_from(&(-integral));
        fw.fixed_view_mut::<3, 3>(ROT, N_GYRO).copy_from(&(-integral));
    }
    (f, fw)
}

/// One propagation step of state and covariance over `dt` with input `u`.
pub fn propagate_step(
    belief: &PropagatedBelief,
    u: &ImuSample,
    dt: f64,
    q: &NoiseCov,
    mode: JacobianMode,
) -> Result<PropagatedBelief> {
    let (f, fw) = transition_jacobians_discrete(&belief.state, u, dt, mode);
    let state = propagate_discrete(&belief.state, u, dt)?;
    let cov = f * belief.cov * f.transpose() + fw * q * fw.transpose();
    Ok(PropagatedBelief { t: belief.t + dt, state, cov: (cov + cov.transpose()) * 0.5 })
}

/// IMU input at time `t`: interpolated between the bracketing samples, clamped to the ends.
pub fn input_at(imu: &[ImuSample], t: f64) -> ImuSample {
    let i = imu.partition_point(|s| s.t <= t);
    if i == 0 {
        return ImuSample { t, ..imu[0] };
    }
    if i == imu.len() {
        return ImuSample { t, ..imu[i - 1] };
    }
    if imu[i - 1].t == t {
        return imu[i - 1];
    }
    ImuSample::lerp(&imu[i - 1], &imu[i], t)
}

/// Propagates `belief` from its own time to `t_end`.
///
/// Each interval between consecutive sample times holds the input at its left end
/// constant; the input at the starting time is interpolated when it falls between samples.
pub fn forward_propagate(
    belief: &PropagatedBelief,
    imu: &[ImuSample],
    t_end: f64,
    q: &NoiseCov,
    mode: JacobianMode,
) -> Result<PropagatedBelief> {
    if imu.is_empty() || imu[0].t > t_end {
        return Err(Error::EmptyImuSpan);
    }
    let t0 = belief.t;
    if t_end < t0 {
        return Err(Error::NonPositiveDt(t_end - t0));
    }
    let mut out = *belief;
    let mut u = input_at(imu, t0);
    let first = imu.partition_point(|s| s.t <= t0);
    let mut t = t0;
    for s in imu[first..].iter().take_while(|s| s.t < t_end) {
        if s.t > t {
            out = propagate_step(&out, &u, s.t - t, q, mode)?;
            out.t = s.t;
            t = s.t;
        }
        u = *s;
    }
    if t_end > t {
        out = propagate_step(&out, &u, t_end - t, q, mode)?;
    }
    out.t = t_end;
    out.state.rot = out.state.rot.renormalize();
    Ok(out)
}

/// Relative motion of the IMU at every point's capture time with respect to the
/// scan-end IMU frame, in the order of `scan.points`.
///
/// The recursion runs backward from the scan end through every point timestamp and
/// IMU sample time, holding the sample at the left end of each interval.
pub fn backward_propagate(scan: &ScanBundle, x_end: &State) -> Result<Vec<RelativeMotion>> {
    let imu = &scan.imu;
    if imu.is_empty() {
        return Err(Error::EmptyImuSpan);
    }
    let start = imu[0].t;
    let end = scan.t_end;
    for p in &scan.points {
        if !(p.t >= start && p.t <= end) {
            return Err(Error::TimestampOutOfSpan { t: p.t, start, end });
        }
    }
    let mut order: Vec<usize> = (0..scan.points.len()).collect();
    order.sort_by(|&a, &b| scan.points[b].t.total_cmp(&scan.points[a].t));

    let rt = x_end.rot.matrix().transpose();
    let grav = rt * x_end.grav;
    let mut rot = Rotation::identity();
    let mut trans = Vec3::zeros();
    let mut vel = rt * x_end.vel;
    let mut t = end;
    // Index of the sample at the left end of the interval that ends at `t`.
    let mut i = imu.partition_point(|s| s.t < t).saturating_sub(1);

    let mut out = vec![RelativeMotion::identity(end); scan.points.len()];
    for idx in order {
        let target = scan.points[idx].t;
        while t > target {
            while i > 0 && imu[i].t >= t {
                i -= 1;
            }
            let s = &imu[i];
            let to = s.t.max(target);
            let dt = t - to;
            let next_trans = trans - vel * dt;
            let next_vel = vel - rot.rotate(&(s.acc - x_end.ba)) * dt - grav * dt;
            rot = rot.boxplus(&((x_end.bg - s.gyro) * dt));
            trans = next_trans;
            vel = next_vel;
            t = to;
        }
        out[idx] = RelativeMotion { rot, trans, vel, t: target };
    }
    Ok(out)
}

/// Re-expresses a point captured at the relative motion's time in the scan-end LiDAR frame:
/// `p_end = T_ILᵀ · T_rel · T_IL · p`.
pub fn deskew_point(ray: &LidarRay, rel: &RelativeMotion, extrinsic: &Extrinsic) -> Vec3 {
    deskew_vec(&ray.point(), rel, extrinsic)
}

pub fn deskew_vec(p: &Vec3, rel: &RelativeMotion, extrinsic: &Extrinsic) -> Vec3 {
    extrinsic.apply_inverse(&rel.pose().apply(&extrinsic.apply(p)))
}

/// Deskews a point together with its covariance.
pub fn deskew_local(lp: &LocalPoint, rel: &RelativeMotion, extrinsic: &Extrinsic) -> LocalPoint {
    let r = extrinsic.rot.matrix().transpose() * rel.rot.matrix() * extrinsic.rot.matrix();
    LocalPoint { p: deskew_vec(&lp.p, rel, extrinsic), cov: r * lp.cov * r.transpose() }
}
