//! Absolute trajectory error against a time-stamped reference.

use crate::error::{Error, Result};
use crate::kinematics::Pose;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AteReport {
    /// Root-mean-square translation error, m.
    pub rmse: f64,
    /// Largest rotation error angle, rad.
    pub max_rotation_error: f64,
    pub max_translation_error: f64,
    pub count: usize,
}

/// Reference pose at `t`: linear in translation and geodesic in rotation between the
/// bracketing entries.
pub fn interpolate_pose(series: &[(f64, Pose)], t: f64) -> Result<Pose> {
    const SLACK: f64 = 1e-9;
    let (first, last) = match (series.first(), series.last()) {
        (Some(f), Some(l)) => (f.0, l.0),
        _ => return Err(Error::MisalignedSeries("reference trajectory is empty".into())),
    };
    if !(t >= first - SLACK && t <= last + SLACK) {
        return Err(Error::MisalignedSeries(format!("t={t} outside reference span [{first}, {last}]")));
    }
    let i = series.partition_point(|(ts, _)| *ts <= t);
    if i == 0 {
        return Ok(series[0].1);
    }
    if i == series.len() {
        return Ok(series[i - 1].1);
    }
    let (ta, a) = &series[i - 1];
    let (tb, b) = &series[i];
    let s = if tb > ta { (t - ta) / (tb - ta) } else { 0.0 };
    let delta = b.rot.boxminus(&a.rot)?;
    Ok(Pose::new(a.rot.boxplus(&(delta * s)), a.trans + (b.trans - a.trans) * s))
}

/// ATE without alignment: both trajectories share the initial frame by construction.
pub fn evaluate_ate(estimated: &[(f64, Pose)], truth: &[(f64, Pose)]) -> Result<AteReport> {
    if estimated.is_empty() {
        return Err(Error::MisalignedSeries("estimated trajectory is empty".into()));
    }
    if truth.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::MisalignedSeries("reference timestamps decrease".into()));
    }
    let mut sq = 0.0;
    let mut max_rot: f64 = 0.0;
    let mut max_trans: f64 = 0.0;
    for (t, est) in estimated {
        let gt = interpolate_pose(truth, *t)?;
        let e = (est.trans - gt.trans).norm();
        sq += e * e;
        max_trans = max_trans.max(e);
        max_rot = max_rot.max(est.rot.boxminus(&gt.rot)?.norm());
    }
    Ok(AteReport {
        rmse: (sq / estimated.len() as f64).sqrt(),
        max_rotation_error: max_rot,
        max_translation_error: max_trans,
        count: estimated.len(),
    })
}
