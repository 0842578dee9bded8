//! Synthetic environments made of bounded rectangular planar patches.

use crate::manifold::Vec3;

/// A rectangle with centre `center`, orthonormal in-plane axes `u`, `v` and half-extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub center: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub half_u: f64,
    pub half_v: f64,
}

impl Patch {
    /// Builds a patch from its centre, two in-plane directions and half-extents.
    pub fn new(center: Vec3, u: Vec3, v: Vec3, half_u: f64, half_v: f64) -> Self {
        let u = u.normalize();
        let v = (v - u * u.dot(&v)).normalize();
        Patch { center, u, v, half_u, half_v }
    }

    pub fn normal(&self) -> Vec3 {
        self.u.cross(&self.v)
    }

    /// Ray parameter of the hit, if the ray `origin + s·dir` (s > 0) crosses the rectangle.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = n.dot(&(self.center - origin)) / denom;
        if s <= 0.0 {
            return None;
        }
        let rel = origin + dir * s - self.center;
        (rel.dot(&self.u).abs() <= self.half_u && rel.dot(&self.v).abs() <= self.half_v).then_some(s)
    }

    /// Whether `p` lies on the patch within `tol` of its plane and inside its extent.
    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        let rel = p - self.center;
        rel.dot(&self.normal()).abs() <= tol
            && rel.dot(&self.u).abs() <= self.half_u + tol
            && rel.dot(&self.v).abs() <= self.half_v + tol
    }

    /// Whether the patch meets the axis-aligned cube `center ± half`.
    pub fn intersects_cube(&self, center: &Vec3, half: f64) -> bool {
        // Separating-axis test between the rectangle and the cube.
        let n = self.normal();
        let d = self.center - center;
        let axes = [Vec3::x(), Vec3::y(), Vec3::z(), n];
        axes.iter().all(|a| {
            let r_rect = self.half_u * self.u.dot(a).abs() + self.half_v * self.v.dot(a).abs();
            let r_cube = half * (a.x.abs() + a.y.abs() + a.z.abs());
            d.dot(a).abs() <= r_rect + r_cube
        })
    }
}

/// A set of patches; ray queries return the nearest hit.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub patches: Vec<Patch>,
}

impl SyntheticWorld {
    /// Interior of the axis-aligned box `lo..hi`: floor, ceiling and four walls.
    pub fn room(lo: Vec3, hi: Vec3) -> Self {
        let c = (lo + hi) * 0.5;
        let h = (hi - lo) * 0.5;
        let (x, y, z) = (Vec3::x(), Vec3::y(), Vec3::z());
        SyntheticWorld {
            patches: vec![
                Patch::new(Vec3::new(c.x, c.y, lo.z), x, y, h.x, h.y),
                Patch::new(Vec3::new(c.x, c.y, hi.z), x, y, h.x, h.y),
                Patch::new(Vec3::new(lo.x, c.y, c.z), y, z, h.y, h.z),
                Patch::new(Vec3::new(hi.x, c.y, c.z), y, z, h.y, h.z),
                Patch::new(Vec3::new(c.x, lo.y, c.z), x, z, h.x, h.z),
                Patch::new(Vec3::new(c.x, hi.y, c.z), x, z, h.x, h.z),
            ],
        }
    }

    /// The default corner room. Its walls sit away from integer coordinates so no wall
    /// coincides with a voxel face.
    pub fn corner_room() -> Self {
        SyntheticWorld::room(Vec3::new(-3.3, -2.7, -1.3), Vec3::new(3.6, 3.2, 1.9))
    }

    /// Nearest hit along a unit ray: `(range, patch index)`.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, usize)> {
        self.patches
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(origin, dir).map(|s| (s, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Whether at least three patch normals are linearly independent.
    pub fn fully_constraining(&self) -> bool {
        let ns: Vec<Vec3> = self.patches.iter().map(|p| p.normal()).collect();
        ns.iter().enumerate().any(|(i, a)| {
            ns[i + 1..]
                .iter()
                .enumerate()
                .any(|(j, b)| ns[i + 1 + j + 1..].iter().any(|c| a.cross(b).dot(c).abs() > 1e-6))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn room_rays_hit_the_expected_wall() {
        let w = SyntheticWorld::corner_room();
        assert!(w.fully_constraining());
        let (d, i) = w.cast(&Vec3::zeros(), &Vec3::x()).unwrap();
        assert_relative_eq!(d, 3.6, epsilon = 1e-12);
        assert_eq!(i, 3);
        let (d, i) = w.cast(&Vec3::zeros(), &-Vec3::z()).unwrap();
        assert_relative_eq!(d, 1.3, epsilon = 1e-12);
        assert_eq!(i, 0);
        let dir = Vec3::new(1.0, 1.0, 0.2).normalize();
        let (d, i) = w.cast(&Vec3::zeros(), &dir).unwrap();
        assert!(w.patches[i].contains(&(dir * d), 1e-12));
    }

    #[test]
    fn rays_from_outside_can_miss() {
        let w = SyntheticWorld { patches: vec![Patch::new(Vec3::zeros(), Vec3::x(), Vec3::y(), 1.0, 1.0)] };
        assert!(w.cast(&Vec3::new(0.0, 0.0, 1.0), &Vec3::z()).is_none());
        assert!(w.cast(&Vec3::new(5.0, 0.0, 1.0), &-Vec3::z()).is_none());
        assert_relative_eq!(w.cast(&Vec3::new(0.5, 0.5, 1.0), &-Vec3::z()).unwrap().0, 1.0);
    }

    #[test]
    fn cube_overlap() {
        let p = Patch::new(Vec3::new(0.0, 0.0, 0.3), Vec3::x(), Vec3::y(), 2.0, 2.0);
        assert!(p.intersects_cube(&Vec3::new(0.5, 0.5, 0.5), 0.5));
        assert!(!p.intersects_cube(&Vec3::new(0.5, 0.5, 1.5), 0.5));
        assert!(!p.intersects_cube(&Vec3::new(3.5, 0.5, 0.5), 0.5));
    }
}
