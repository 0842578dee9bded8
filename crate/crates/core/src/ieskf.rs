//! Iterated error-state Kalman update on the 18-dimensional state manifold.

use nalgebra::{DMatrix, DVector, SMatrix};

use crate::association::{ObservationRow, Residual};
use crate::error::{Error, Result};
use crate::kinematics::{Cov, State, POS, ROT, STATE_DIM};
use crate::manifold::left_jacobian;
use crate::propagation::PropagatedBelief;

/// How the Kalman gain is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GainMode {
    /// Solve an 18×18 system: `K = (U⁻¹ + HᵀQ⁻¹H)⁻¹ HᵀQ⁻¹`.
    #[default]
    Efficient,
    /// Solve an N×N system: `K = U Hᵀ (Q + H U Hᵀ)⁻¹`.
    Naive,
}

/// Whether the projection of the prior onto the current iterate is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorJacobianMode {
    #[default]
    Full,
    /// Force the projection to the identity (plain iterated EKF behaviour).
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the rotation part of each correction, rad.
    pub eps_rot: f64,
    /// Convergence threshold on the translation part of each correction, m.
    pub eps_trans: f64,
    pub gain: GainMode,
    /// Re-associate points with the map on every iteration instead of only the first.
    pub requery: bool,
    pub prior_jacobian: PriorJacobianMode,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_iterations: 5,
            eps_rot: 1e-4,
            eps_trans: 1e-4,
            gain: GainMode::Efficient,
            requery: true,
            prior_jacobian: PriorJacobianMode::Full,
        }
    }
}

/// One scalar measurement `0 = z + H δx + v`, `v ~ N(0, var)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub z: f64,
    pub h: ObservationRow,
    pub var: f64,
}

impl From<&Residual> for Measurement {
    fn from(r: &Residual) -> Self {
        Measurement { z: r.z, h: r.h, var: r.var }
    }
}

/// Supplies the linearized measurements at an iterate.
pub trait ResidualProvider {
    fn measurements(&mut self, x: &State, iteration: usize) -> Vec<Measurement>;
}

impl<F> ResidualProvider for F
where
    F: FnMut(&State, usize) -> Vec<Measurement>,
{
    fn measurements(&mut self, x: &State, iteration: usize) -> Vec<Measurement> {
        self(x, iteration)
    }
}

/// Per-update summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Measurements used in the final iteration.
    pub residuals: usize,
    /// Mean of `|z| / √var` over the final iteration's measurements.
    pub mean_normalized_residual: f64,
    /// Eigenvalue ratio of `U⁻¹ + HᵀQ⁻¹H` in the final iteration.
    pub condition_number: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    pub state: State,
    pub cov: Cov,
    pub diagnostics: UpdateDiagnostics,
}

/// Derivative of `(x ⊞ δ) ⊟ x_prior` with respect to `δ` at zero:
/// block-diag(`J_l(R ⊟ R_prior)⁻ᵀ`, I₁₅).
pub fn prior_jacobian(x: &State, x_prior: &State) -> Result<Cov> {
    let r = x.rot.boxminus(&x_prior.rot)?;
    let inv = crate::manifold::left_jacobian_inv(&r).transpose();
    let mut j = Cov::identity();
    j.fixed_view_mut::<3, 3>(ROT, ROT).copy_from(&inv);
    Ok(j)
}

/// Inverse of [`prior_jacobian`], block-diag(`J_l(R ⊟ R_prior)ᵀ`, I₁₅).
pub fn prior_jacobian_inv(x: &State, x_prior: &State) -> Result<Cov> {
    let r = x.rot.boxminus(&x_prior.rot)?;
    let mut j = Cov::identity();
    j.fixed_view_mut::<3, 3>(ROT, ROT).copy_from(&left_jacobian(&r).transpose());
    Ok(j)
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.inverse());
    }
    m.clone().try_inverse().ok_or(Error::SingularInformationMatrix)
}

fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch.solve(rhs));
    }
    m.clone().lu().solve(rhs).ok_or(Error::SingularInformationMatrix)
}

fn information_matrix(h: &DMatrix<f64>, q: &DVector<f64>, u: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut htqi = h.transpose();
    for (j, qj) in q.iter().enumerate() {
        htqi.column_mut(j).scale_mut(1.0 / qj);
    }
    let s = spd_inverse(u)? + &htqi * h;
    Ok(((&s + s.transpose()) * 0.5, htqi))
}

/// `K = (U⁻¹ + HᵀQ⁻¹H)⁻¹ HᵀQ⁻¹` with diagonal `Q` given as a vector.
pub fn kalman_gain_efficient(h: &DMatrix<f64>, q: &DVector<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (s, htqi) = information_matrix(h, q, u)?;
    let k = spd_solve(&s, &htqi)?;
    if k.iter().all(|v| v.is_finite()) {
        Ok(k)
    } else {
        Err(Error::SingularInformationMatrix)
    }
}

/// `K = U Hᵀ (Q + H U Hᵀ)⁻¹` with diagonal `Q` given as a vector.
pub fn kalman_gain_naive(h: &DMatrix<f64>, q: &DVector<f64>, u: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let uht = u * h.transpose();
    let mut inn = h * &uht;
    for (i, qi) in q.iter().enumerate() {
        inn[(i, i)] += qi;
    }
    let inn = (&inn + inn.transpose()) * 0.5;
    // K = U Hᵀ S⁻¹  ⇔  S Kᵀ = H U
    let kt = spd_solve(&inn, &uht.transpose())?;
    Ok(kt.transpose())
}

fn to_dyn(m: &Cov) -> DMatrix<f64> {
    DMatrix::from_column_slice(STATE_DIM, STATE_DIM, m.as_slice())
}

fn stack(meas: &[Measurement]) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let n = meas.len();
    let mut h = DMatrix::zeros(n, STATE_DIM);
    let mut z = DVector::zeros(n);
    let mut q = DVector::zeros(n);
    for (i, m) in meas.iter().enumerate() {
        h.row_mut(i).copy_from(&m.h);
        z[i] = m.z;
        q[i] = m.var;
    }
    (h, z, q)
}

fn condition_number(s: &DMatrix<f64>) -> f64 {
    let ev = s.clone().symmetric_eigenvalues();
    let max = ev.max();
    let min = ev.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Runs the iterated update starting from the propagated belief.
///
/// Each iteration re-linearizes the measurements at the current iterate, projects the
/// prior covariance into the iterate's tangent space, and applies
/// `x ← x ⊞ (-K z - (I - K H) J⁻¹ (x ⊟ x_prior))`. The posterior covariance
/// `(I - K H) U` uses the quantities of the last iteration.
pub fn iterate_update<P: ResidualProvider + ?Sized>(
    belief: &PropagatedBelief,
    provider: &mut P,
    cfg: &FilterConfig,
) -> Result<UpdateOutcome> {
    let prior = belief.state;
    let p = to_dyn(&belief.cov);
    let eye = DMatrix::<f64>::identity(STATE_DIM, STATE_DIM);
    let mut x = prior;
    let mut last: Option<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = None;
    let mut diag = UpdateDiagnostics {
        iterations: 0,
        converged: false,
        residuals: 0,
        mean_normalized_residual: 0.0,
        condition_number: 1.0,
    };
    for it in 0..cfg.max_iterations.max(1) {
        let meas = provider.measurements(&x, it);
        if meas.is_empty() {
            return Err(Error::NoValidMatches);
        }
        let (h, z, q) = stack(&meas);
        let jinv = match cfg.prior_jacobian {
            PriorJacobianMode::Full => to_dyn(&prior_jacobian_inv(&x, &prior)?),
            PriorJacobianMode::Identity => eye.clone(),
        };
        let u = &jinv * &p * jinv.transpose();
        let u = (&u + u.transpose()) * 0.5;
        let k = match cfg.gain {
            GainMode::Efficient => kalman_gain_efficient(&h, &q, &u)?,
            GainMode::Naive => kalman_gain_naive(&h, &q, &u)?,
        };
        let offset = DVector::from_column_slice(x.boxminus(&prior)?.as_slice());
        let ikh = &eye - &k * &h;
        let dx = -(&k * &z) - &ikh * (&jinv * offset);
        let dx = SMatrix::<f64, STATE_DIM, 1>::from_column_slice(dx.as_slice());
        x = x.boxplus(&dx);

        diag.iterations = it + 1;
        diag.residuals = meas.len();
        diag.mean_normalized_residual = meas.iter().map(|m| m.z.abs() / m.var.sqrt()).sum::<f64>() / meas.len() as f64;
        diag.condition_number =
            information_matrix(&h, &q, &u).map(|(s, _)| condition_number(&s)).unwrap_or(f64::INFINITY);
        last = Some((ikh, u, k));
        let drot = dx.fixed_rows::<3>(ROT).norm();
        let dpos = dx.fixed_rows::<3>(POS).norm();
        if drot < cfg.eps_rot && dpos < cfg.eps_trans {
            diag.converged = true;
            break;
        }
    }
    let (ikh, u, _) = last.expect("at least one iteration");
    let post = &ikh * &u;
    let post = (&post + post.transpose()) * 0.5;
    x.rot = x.rot.renormalize();
    Ok(UpdateOutcome { state: x, cov: Cov::from_column_slice(post.as_slice()), diagnostics: diag })
}

/// Negative log posterior (up to constants) at `x` for measurements linear in `x ⊟ x_prior`:
/// `‖x ⊟ x_prior‖²_{P⁻¹} + Σ zᵢ² / varᵢ`.
pub fn map_objective(x: &State, prior: &State, cov: &Cov, meas: &[Measurement]) -> Result<f64> {
    let d = x.boxminus(prior)?;
    let pinv = spd_inverse(&to_dyn(cov))?;
    let dv = DVector::from_column_slice(d.as_slice());
    let prior_term = (dv.transpose() * pinv * &dv)[0];
    Ok(prior_term + meas.iter().map(|m| m.z * m.z / m.var).sum::<f64>())
}
