//! Measurement-noise propagation: LiDAR points in the sensor and global frames, and
//! planes fitted to point sets with a full normal/anchor covariance.

use nalgebra::{Matrix2, Matrix3x2, Matrix6, SMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::manifold::{skew, Mat3, Rotation, UnitBearing, Vec3};

/// A raw range-bearing return with its noise model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarRay {
    pub bearing: UnitBearing,
    pub depth: f64,
    /// Capture time of this return.
    pub t: f64,
    /// Range variance, m².
    pub range_var: f64,
    /// Bearing covariance in the tangent plane, rad².
    pub bearing_cov: Matrix2<f64>,
}

impl LidarRay {
    pub fn point(&self) -> Vec3 {
        self.bearing.as_vec() * self.depth
    }
}

/// A point with covariance in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalPoint {
    pub p: Vec3,
    pub cov: Mat3,
}

/// A point with covariance in the global frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldPoint {
    pub p: Vec3,
    pub cov: Mat3,
}

impl WorldPoint {
    pub fn new(p: Vec3, cov: Mat3) -> Self {
        WorldPoint { p, cov }
    }
}

/// `Σ = Σ_d φφᵀ + d² ⌊φ⌋ N Σ_φ Nᵀ ⌊φ⌋ᵀ`.
pub fn local_point_cov(ray: &LidarRay) -> LocalPoint {
    let phi = ray.bearing.as_vec();
    let a = -ray.depth * skew(phi) * ray.bearing.tangent_basis();
    let cov = phi * phi.transpose() * ray.range_var + a * ray.bearing_cov * a.transpose();
    LocalPoint { p: ray.point(), cov: symmetrize3(&cov) }
}

/// Maps a sensor-frame point into the global frame with pose covariance
/// (`cov_rot` on the right-perturbation of `rot`, `cov_trans` on the translation).
pub fn world_point_cov(lp: &LocalPoint, rot: &Rotation, trans: &Vec3, cov_rot: &Mat3, cov_trans: &Mat3) -> WorldPoint {
    let r = rot.matrix();
    let rp = r * skew(&lp.p);
    let cov = r * lp.cov * r.transpose() + rp * cov_rot * rp.transpose() + cov_trans;
    WorldPoint { p: r * lp.p + trans, cov: symmetrize3(&cov) }
}

fn symmetrize3(m: &Mat3) -> Mat3 {
    (m + m.transpose()) * 0.5
}

/// Thresholds for accepting a point scatter as a plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFitConfig {
    pub min_points: usize,
    /// Largest accepted RMS out-of-plane spread, m.
    pub plane_rms: f64,
    /// Largest accepted `λ₃ / λ₂`.
    pub thickness_ratio: f64,
    /// Spectral gaps below `gap_floor · λ₁` are treated as degenerate.
    pub gap_floor: f64,
    /// Smallest accepted `λ₂ / (u₂ᵀ Σ̄ u₂)` with `Σ̄` the mean point covariance: the
    /// second in-plane axis must be real extent, not measurement noise stretching a
    /// line of samples into a sheet. Zero disables the test.
    pub support_ratio: f64,
    /// Largest accepted `λ₃ / (nᵀ Σ̄ n)`: the out-of-plane spread must be explained by
    /// point noise, which rejects voxels clipping a few points of an adjacent surface.
    /// Zero disables the test.
    pub noise_ratio: f64,
    /// Smallest accepted `|cos|` between the normal and the line of sight to the
    /// centroid. A single scan ring bending around an edge lies on its own scan cone and
    /// fits a plane seen exactly edge-on. Zero disables the test.
    pub min_incidence_cos: f64,
}

impl Default for PlaneFitConfig {
    fn default() -> Self {
        PlaneFitConfig {
            min_points: 10,
            plane_rms: 0.05,
            thickness_ratio: 0.1,
            gap_floor: 1e-6,
            support_ratio: 0.0,
            noise_ratio: 0.0,
            min_incidence_cos: 0.0,
        }
    }
}

/// A fitted plane: unit normal, centroid anchor, and the joint 6×6 covariance of
/// `(n, q)` with the normal block first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFeature {
    pub normal: Vec3,
    pub center: Vec3,
    pub cov: Matrix6<f64>,
    /// Scatter eigenvalues, descending.
    pub eigenvalues: Vec3,
    /// Matching eigenvectors as columns; the last column is `±normal`.
    pub eigenvectors: Mat3,
    pub count: usize,
}

impl PlaneFeature {
    pub fn normal_cov(&self) -> Mat3 {
        self.cov.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn center_cov(&self) -> Mat3 {
        self.cov.fixed_view::<3, 3>(3, 3).into_owned()
    }

    /// Signed distance `nᵀ(p - q)`.
    pub fn distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(&(p - self.center))
    }
}

/// Scatter statistics of a point set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatter {
    pub center: Vec3,
    pub eigenvalues: Vec3,
    pub eigenvectors: Mat3,
    pub count: usize,
}

/// Result of a plane fit that did not hit an error.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)] // returned and consumed at once, never stored
pub enum PlaneFit {
    Plane(PlaneFeature),
    NotPlanar(Scatter),
}

impl PlaneFit {
    pub fn plane(&self) -> Option<&PlaneFeature> {
        match self {
            PlaneFit::Plane(p) => Some(p),
            PlaneFit::NotPlanar(_) => None,
        }
    }
}

/// Centroid and eigen-decomposition (descending) of the scatter matrix
/// `A = (1/N) Σ (p - p̄)(p - p̄)ᵀ`.
pub fn scatter(points: &[Vec3]) -> Scatter {
    let n = points.len() as f64;
    let center = points.iter().sum::<Vec3>() / n;
    let mut a = Mat3::zeros();
    for p in points {
        let c = p - center;
        a += c * c.transpose();
    }
    a /= n;
    let eig = SymmetricEigen::new(a);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues = Vec3::new(eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    let eigenvectors = Mat3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    Scatter { center, eigenvalues, eigenvectors, count: points.len() }
}

fn check_gap(l: &Vec3, floor: f64) -> Result<()> {
    let threshold = floor * l[0];
    let gap = l[1] - l[2];
    if l[0].is_nan() || l[0] <= 0.0 || gap < threshold || l[0] - l[2] < threshold {
        return Err(Error::DegenerateSpectrum { gap, floor: threshold });
    }
    Ok(())
}

/// Fits a plane by total least squares and propagates the point covariances.
///
/// The normal is oriented toward `viewpoint`. Scatters that fail the planarity
/// thresholds come back as [`PlaneFit::NotPlanar`].
pub fn fit_plane(points: &[WorldPoint], viewpoint: &Vec3, cfg: &PlaneFitConfig) -> Result<PlaneFit> {
    if points.len() < cfg.min_points.max(3) {
        return Err(Error::TooFewPoints { needed: cfg.min_points.max(3), got: points.len() });
    }
    let pos: Vec<Vec3> = points.iter().map(|w| w.p).collect();
    let mut sc = scatter(&pos);
    check_gap(&sc.eigenvalues, cfg.gap_floor)?;
    let l = sc.eigenvalues;
    if l[2] > cfg.plane_rms * cfg.plane_rms || l[2] > cfg.thickness_ratio * l[1] {
        return Ok(PlaneFit::NotPlanar(sc));
    }
    if cfg.support_ratio > 0.0 || cfg.noise_ratio > 0.0 {
        let mean_cov = points.iter().map(|w| w.cov).sum::<Mat3>() / points.len() as f64;
        let along = |k: usize| {
            let u: Vec3 = sc.eigenvectors.column(k).into_owned();
            u.dot(&(mean_cov * u))
        };
        let thin_support = cfg.support_ratio > 0.0 && l[1] < cfg.support_ratio * along(1);
        let too_thick = cfg.noise_ratio > 0.0 && l[2] > cfg.noise_ratio * along(2) + cfg.gap_floor * l[0];
        if thin_support || too_thick {
            return Ok(PlaneFit::NotPlanar(sc));
        }
    }
    let mut normal: Vec3 = sc.eigenvectors.column(2).into_owned();
    let sight = viewpoint - sc.center;
    if cfg.min_incidence_cos > 0.0 && normal.dot(&sight).abs() < cfg.min_incidence_cos * sight.norm() {
        return Ok(PlaneFit::NotPlanar(sc));
    }
    if normal.dot(&sight) < 0.0 {
        normal = -normal;
        sc.eigenvectors.set_column(2, &normal);
    }
    let jac = plane_jacobians(&pos, &sc.eigenvectors, &sc.eigenvalues, &sc.center, cfg.gap_floor)?;
    let cov = plane_cov(points, &jac);
    Ok(PlaneFit::Plane(PlaneFeature {
        normal,
        center: sc.center,
        cov,
        eigenvalues: sc.eigenvalues,
        eigenvectors: sc.eigenvectors,
        count: points.len(),
    }))
}

/// Per-point 6×3 derivative blocks `[∂n/∂pᵢ; ∂q/∂pᵢ]`.
///
/// `eigenvectors` must be the descending eigenbasis whose last column is the normal
/// as used by the caller (its sign carries through).
pub fn plane_jacobians(
    points: &[Vec3],
    eigenvectors: &Mat3,
    eigenvalues: &Vec3,
    center: &Vec3,
    gap_floor: f64,
) -> Result<Vec<SMatrix<f64, 6, 3>>> {
    check_gap(eigenvalues, gap_floor)?;
    let nf = points.len() as f64;
    let n: Vec3 = eigenvectors.column(2).into_owned();
    let u1: Vec3 = eigenvectors.column(0).into_owned();
    let u2: Vec3 = eigenvectors.column(1).into_owned();
    // Row m of F is (p - p̄)ᵀ (u_m nᵀ + n u_mᵀ) / (N (λ₃ - λ_m)); the third row vanishes.
    let m1 = (u1 * n.transpose() + n * u1.transpose()) / (nf * (eigenvalues[2] - eigenvalues[0]));
    let m2 = (u2 * n.transpose() + n * u2.transpose()) / (nf * (eigenvalues[2] - eigenvalues[1]));
    let dq = Mat3::identity() / nf;
    Ok(points
        .iter()
        .map(|p| {
            let c = p - center;
            let f1 = c.transpose() * m1;
            let f2 = c.transpose() * m2;
            let dn = u1 * f1 + u2 * f2;
            let mut j = SMatrix::<f64, 6, 3>::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&dn);
            j.fixed_view_mut::<3, 3>(3, 0).copy_from(&dq);
            j
        })
        .collect())
}

/// `Σ_{n,q} = Σᵢ Jᵢ Σ_{pᵢ} Jᵢᵀ`.
pub fn plane_cov(points: &[WorldPoint], jacobians: &[SMatrix<f64, 6, 3>]) -> Matrix6<f64> {
    let mut cov = Matrix6::zeros();
    for (p, j) in points.iter().zip(jacobians) {
        cov += j * p.cov * j.transpose();
    }
    (cov + cov.transpose()) * 0.5
}

/// Tangent-plane basis used to express normal perturbations in two coordinates.
pub fn normal_tangent_basis(n: &Vec3) -> Matrix3x2<f64> {
    crate::manifold::tangent_basis(&UnitBearing::new_unchecked(*n))
}
