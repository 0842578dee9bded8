//! Encapsulation calculus on SO(3), R^n, their products, and the unit sphere S^2.
//!
//! Conventions used across the crate:
//! * `R ⊞ r = R · Exp(r)` and `R₁ ⊟ R₂ = Log(R₂ᵀ R₁)` (perturbations on the right).
//! * `a ⊞ b = a + b` and `a ⊟ b = a - b` on Euclidean components.
//! * `skew(v)` is the cross-product matrix, `skew(a) b = a × b`.

use nalgebra::{DVector, Matrix2, Matrix3, Matrix3x2, Rotation3, UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle the closed forms are replaced by their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Largest angle accepted by [`so3_log`]; beyond it the axis sign is ambiguous.
pub const LOG_ANGLE_LIMIT: f64 = std::f64::consts::PI - 1e-6;

/// Cross-product matrix of `v`.
#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`] applied to the antisymmetric part of `m`.
#[inline]
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(0.5 * (m[(2, 1)] - m[(1, 2)]), 0.5 * (m[(0, 2)] - m[(2, 0)]), 0.5 * (m[(1, 0)] - m[(0, 1)]))
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Mat3::identity())
    }

    /// Wraps `m` after checking orthonormality and orientation to `tol`.
    pub fn from_matrix(m: Mat3, tol: f64) -> Option<Self> {
        let r = Rotation(m);
        (r.orthonormality_error() <= tol && (m.determinant() - 1.0).abs() <= tol).then_some(r)
    }

    /// Wraps `m` without any check. The caller guarantees it is a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rotation(m)
    }

    /// Projects an arbitrary matrix onto the closest rotation (polar decomposition).
    pub fn from_matrix_projected(m: &Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let vt = svd.v_t.expect("svd v_t");
        let mut d = Mat3::identity();
        if (u * vt).determinant() < 0.0 {
            d[(2, 2)] = -1.0;
        }
        Rotation(u * d * vt)
    }

    /// Builds the rotation of a unit quaternion given as `(x, y, z, w)`.
    pub fn from_quaternion(x: f64, y: f64, z: f64, w: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Rotation(*q.to_rotation_matrix().matrix())
    }

    /// Unit quaternion `(x, y, z, w)` with non-negative `w`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0));
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    pub fn exp(r: &Vec3) -> Self {
        so3_exp(r)
    }

    pub fn log(&self) -> Result<Vec3> {
        so3_log(self)
    }

    #[inline]
    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    #[inline]
    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    #[inline]
    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    #[inline]
    pub fn compose(&self, other: &Rotation) -> Self {
        Rotation(self.0 * other.0)
    }

    #[inline]
    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// `R ⊞ r`.
    pub fn boxplus(&self, r: &Vec3) -> Self {
        Rotation(self.0 * so3_exp(r).0)
    }

    /// `self ⊟ other = Log(otherᵀ self)`.
    pub fn boxminus(&self, other: &Rotation) -> Result<Vec3> {
        so3_log(&Rotation(other.0.transpose() * self.0))
    }

    /// Max absolute entry of `RᵀR - I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Mat3::identity()).amax()
    }

    /// Removes drift accumulated by long products.
    pub fn renormalize(&self) -> Self {
        Self::from_matrix_projected(&self.0)
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let s = vee(&self.0).norm();
        let c = 0.5 * (self.0.trace() - 1.0);
        s.atan2(c)
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.rotate(&rhs)
    }
}

/// Exponential map from a rotation vector to SO(3) (Rodrigues).
pub fn so3_exp(r: &Vec3) -> Rotation {
    let theta = r.norm();
    let k = skew(r);
    if theta < SMALL_ANGLE {
        return Rotation(Mat3::identity() + k + 0.5 * k * k);
    }
    let a = k / theta;
    // 1 - cos θ written as 2 sin²(θ/2) keeps full precision near zero.
    let h = (0.5 * theta).sin();
    Rotation(Mat3::identity() + theta.sin() * a + 2.0 * h * h * a * a)
}

/// Logarithm map on the principal branch.
///
/// Fails with [`Error::AngleNearPi`] when the angle exceeds [`LOG_ANGLE_LIMIT`].
pub fn so3_log(rot: &Rotation) -> Result<Vec3> {
    let m = rot.matrix();
    let w = vee(m);
    let s = w.norm();
    let c = 0.5 * (m.trace() - 1.0);
    let theta = s.atan2(c);
    if theta > LOG_ANGLE_LIMIT {
        return Err(Error::AngleNearPi { angle: theta });
    }
    if theta < SMALL_ANGLE {
        // θ / sin θ = 1 + θ²/6 + O(θ⁴)
        return Ok(w * (1.0 + theta * theta / 6.0));
    }
    if c > -0.5 {
        return Ok(w * (theta / s));
    }
    // Past 120° the antisymmetric part loses precision; recover the axis from
    // the symmetric part R + Rᵀ = 2cI + 2(1 - c)aaᵀ and take its sign from w.
    let b = (0.5 * (m + m.transpose()) - c * Mat3::identity()) / (1.0 - c);
    let mut col = 0;
    for i in 1..3 {
        if b[(i, i)] > b[(col, col)] {
            col = i;
        }
    }
    let mut axis: Vec3 = b.column(col).into_owned();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Left Jacobian of SO(3):
/// `(sin θ/θ) I + (1 - sin θ/θ) aaᵀ + ((1 - cos θ)/θ) skew(a)` with `u = θa`.
pub fn left_jacobian(u: &Vec3) -> Mat3 {
    if u.norm() < SMALL_ANGLE {
        left_jacobian_series(u)
    } else {
        left_jacobian_closed(u)
    }
}

fn left_jacobian_series(u: &Vec3) -> Mat3 {
    let k = skew(u);
    Mat3::identity() + 0.5 * k + (1.0 / 6.0) * k * k
}

fn left_jacobian_closed(u: &Vec3) -> Mat3 {
    let theta = u.norm();
    let a = u / theta;
    let sinc = theta.sin() / theta;
    let h = (0.5 * theta).sin();
    let one_minus_cos = 2.0 * h * h;
    sinc * Mat3::identity() + (1.0 - sinc) * a * a.transpose() + (one_minus_cos / theta) * skew(&a)
}

/// Inverse of [`left_jacobian`], valid for `‖u‖ < 2π`.
pub fn left_jacobian_inv(u: &Vec3) -> Mat3 {
    if u.norm() < SMALL_ANGLE {
        left_jacobian_inv_series(u)
    } else {
        left_jacobian_inv_closed(u)
    }
}

fn left_jacobian_inv_series(u: &Vec3) -> Mat3 {
    let k = skew(u);
    Mat3::identity() - 0.5 * k + (1.0 / 12.0) * k * k
}

fn left_jacobian_inv_closed(u: &Vec3) -> Mat3 {
    let theta = u.norm();
    let k = skew(u);
    let half = 0.5 * theta;
    // 1/θ² - (1 + cos θ) / (2θ sin θ) = (1 - (θ/2) cot(θ/2)) / θ²
    let coeff = (1.0 - half / half.tan()) / (theta * theta);
    Mat3::identity() - 0.5 * k + coeff * k * k
}

/// Right Jacobian, `J_r(u) = J_l(-u) = J_l(u)ᵀ`.
pub fn right_jacobian(u: &Vec3) -> Mat3 {
    left_jacobian(u).transpose()
}

/// A direction on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitBearing(Vec3);

impl UnitBearing {
    /// Normalizes `v`. Returns `None` for zero or non-finite input.
    pub fn new(v: Vec3) -> Option<Self> {
        let n = v.norm();
        (n.is_finite() && n > 0.0).then(|| UnitBearing(v / n))
    }

    pub fn new_unchecked(v: Vec3) -> Self {
        UnitBearing(v)
    }

    #[inline]
    pub fn as_vec(&self) -> &Vec3 {
        &self.0
    }

    pub fn into_vec(self) -> Vec3 {
        self.0
    }

    pub fn tangent_basis(&self) -> Matrix3x2<f64> {
        tangent_basis(self)
    }

    pub fn boxplus(&self, d: &Vector2<f64>) -> Self {
        s2_boxplus(self, d)
    }
}

/// Orthonormal basis of the tangent plane at `phi`.
///
/// Built by Gram-Schmidt on the coordinate axis least aligned with `phi`, so it is
/// deterministic but jumps where that choice of axis changes.
pub fn tangent_basis(phi: &UnitBearing) -> Matrix3x2<f64> {
    let p = phi.as_vec();
    let mut axis = 0;
    for i in 1..3 {
        if p[i].abs() < p[axis].abs() {
            axis = i;
        }
    }
    let mut e = Vec3::zeros();
    e[axis] = 1.0;
    let b1 = (e - p * p.dot(&e)).normalize();
    let b2 = p.cross(&b1);
    Matrix3x2::from_columns(&[b1, b2])
}

/// `phi ⊞ d = Exp(N(phi) d) phi`.
pub fn s2_boxplus(phi: &UnitBearing, d: &Vector2<f64>) -> UnitBearing {
    let r = tangent_basis(phi) * d;
    let v = so3_exp(&r).rotate(phi.as_vec());
    UnitBearing(v / v.norm())
}

/// `y ⊟ x` on S², the tangent coordinates in the basis at `x`.
pub fn s2_boxminus(y: &UnitBearing, x: &UnitBearing) -> Vector2<f64> {
    let a = x.as_vec();
    let b = y.as_vec();
    let c = a.cross(b);
    let s = c.norm();
    let theta = s.atan2(a.dot(b));
    let r = if s < SMALL_ANGLE { c } else { c * (theta / s) };
    tangent_basis(x).transpose() * r
}

/// A point on SO(3), R^n, or the compound SO(3) × R^n.
#[derive(Debug, Clone, PartialEq)]
pub enum ManifoldPoint {
    Rotation(Rotation),
    Euclidean(DVector<f64>),
    Compound(Rotation, DVector<f64>),
}

impl ManifoldPoint {
    /// Tangent-space dimension.
    pub fn dim(&self) -> usize {
        match self {
            ManifoldPoint::Rotation(_) => 3,
            ManifoldPoint::Euclidean(v) => v.len(),
            ManifoldPoint::Compound(_, v) => 3 + v.len(),
        }
    }

    pub fn boxplus(&self, u: &DVector<f64>) -> Result<ManifoldPoint> {
        if u.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: u.len() });
        }
        Ok(match self {
            ManifoldPoint::Rotation(r) => ManifoldPoint::Rotation(r.boxplus(&head3(u))),
            ManifoldPoint::Euclidean(v) => ManifoldPoint::Euclidean(v + u),
            ManifoldPoint::Compound(r, v) => ManifoldPoint::Compound(r.boxplus(&head3(u)), v + u.rows(3, v.len())),
        })
    }

    /// `self ⊟ x`.
    pub fn boxminus(&self, x: &ManifoldPoint) -> Result<DVector<f64>> {
        match (self, x) {
            (ManifoldPoint::Rotation(a), ManifoldPoint::Rotation(b)) => {
                Ok(DVector::from_column_slice(a.boxminus(b)?.as_slice()))
            }
            (ManifoldPoint::Euclidean(a), ManifoldPoint::Euclidean(b)) if a.len() == b.len() => Ok(a - b),
            (ManifoldPoint::Compound(ra, va), ManifoldPoint::Compound(rb, vb)) if va.len() == vb.len() => {
                let mut out = DVector::zeros(3 + va.len());
                out.rows_mut(0, 3).copy_from(&ra.boxminus(rb)?);
                out.rows_mut(3, va.len()).copy_from(&(va - vb));
                Ok(out)
            }
            _ => Err(Error::DimensionMismatch { expected: x.dim(), got: self.dim() }),
        }
    }
}

fn head3(u: &DVector<f64>) -> Vec3 {
    Vec3::new(u[0], u[1], u[2])
}

/// Rotation covariance expressed through the tangent basis, `N Σ Nᵀ`.
pub fn lift_tangent_cov(phi: &UnitBearing, cov: &Matrix2<f64>) -> Mat3 {
    let n = tangent_basis(phi);
    n * cov * n.transpose()
}
