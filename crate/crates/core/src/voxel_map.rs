//! Hash-indexed root voxels, each refined into an octree whose leaves hold either a
//! raw point buffer or a probabilistic plane.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt::Write as _;
use std::hash::{BuildHasherDefault, Hash, Hasher};

use crate::association::residual_variance;
use crate::manifold::Vec3;
use crate::uncertainty::{fit_plane, PlaneFeature, PlaneFit, PlaneFitConfig, WorldPoint};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelMapConfig {
    /// Edge length of a root voxel, m.
    pub root_size: f64,
    /// Deepest octree level; the root is level 0.
    pub max_depth: u8,
    /// Points needed before a buffer is fitted.
    pub min_points: usize,
    /// Cap on undecided buffers and on the recent-point ring of converged planes.
    pub max_buffer_points: usize,
    /// A plane whose `trace(Σ_nq)` drops below this stops accumulating points.
    pub plane_converged_trace: f64,
    /// Angle between stored and freshly observed normals that triggers a rebuild, rad.
    pub normal_change_thresh: f64,
    /// New points between refits.
    pub update_batch: usize,
    /// Also poll the six face-adjacent root voxels when matching.
    pub search_neighbors: bool,
    /// Point count at which an unconverged plane is frozen anyway.
    pub max_plane_points: usize,
    pub plane: PlaneFitConfig,
}

impl Default for VoxelMapConfig {
    fn default() -> Self {
        VoxelMapConfig {
            root_size: 1.0,
            max_depth: 3,
            min_points: 10,
            max_buffer_points: 50,
            plane_converged_trace: 1e-5,
            normal_change_thresh: 0.1,
            update_batch: 5,
            search_neighbors: true,
            max_plane_points: 400,
            plane: PlaneFitConfig::default(),
        }
    }
}

/// Integer cell of a root voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct VoxelKey {
    pub x: i64,
    pub y: i64,
    pub z: i64,
}

impl VoxelKey {
    pub fn new(x: i64, y: i64, z: i64) -> Self {
        VoxelKey { x, y, z }
    }

    pub fn from_point(p: &Vec3, root_size: f64) -> Self {
        VoxelKey {
            x: (p.x / root_size).floor() as i64,
            y: (p.y / root_size).floor() as i64,
            z: (p.z / root_size).floor() as i64,
        }
    }

    /// Spatial-hash mix with the primes 73856093, 19349663, 83492791.
    pub fn mix(&self) -> u64 {
        (self.x.wrapping_mul(73_856_093) ^ self.y.wrapping_mul(19_349_663) ^ self.z.wrapping_mul(83_492_791)) as u64
    }

    /// The six face neighbours, in a fixed order.
    pub fn face_neighbors(&self) -> [VoxelKey; 6] {
        let VoxelKey { x, y, z } = *self;
        [
            VoxelKey::new(x - 1, y, z),
            VoxelKey::new(x + 1, y, z),
            VoxelKey::new(x, y - 1, z),
            VoxelKey::new(x, y + 1, z),
            VoxelKey::new(x, y, z - 1),
            VoxelKey::new(x, y, z + 1),
        ]
    }

    pub fn center(&self, root_size: f64) -> Vec3 {
        Vec3::new(self.x as f64 + 0.5, self.y as f64 + 0.5, self.z as f64 + 0.5) * root_size
    }
}

impl Hash for VoxelKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.mix());
    }
}

/// Hasher that passes the pre-mixed key through unchanged.
#[derive(Default)]
pub struct SpatialHasher(u64);

impl Hasher for SpatialHasher {
    fn finish(&self) -> u64 {
        // Spread the low bits used by the table's bucket index.
        self.0.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 = (self.0 ^ *b as u64).wrapping_mul(0x100_0000_01B3);
        }
    }

    fn write_u64(&mut self, v: u64) {
        self.0 = v;
    }
}

type KeyMap<V> = HashMap<VoxelKey, V, BuildHasherDefault<SpatialHasher>>;

/// Points waiting for enough support to be classified.
#[derive(Debug, Clone, PartialEq)]
pub struct PointBuffer {
    pub points: Vec<WorldPoint>,
    since_fit: usize,
    attempted: bool,
}

impl PointBuffer {
    /// Keeps the newest `cap` points.
    fn trim(&mut self, cap: usize) {
        if self.points.len() > cap {
            let excess = self.points.len() - cap;
            self.points.drain(..excess);
        }
    }
}

/// Thin within the planarity tolerance and spread along one axis only.
fn is_line_like(l: &Vec3, cfg: &PlaneFitConfig) -> bool {
    l[2] <= cfg.plane_rms * cfg.plane_rms && l[1] < cfg.thickness_ratio * l[0]
}

/// A leaf that carries a plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneLeaf {
    pub plane: PlaneFeature,
    /// Points behind the current fit; emptied once the plane converges.
    pub points: Vec<WorldPoint>,
    pub converged: bool,
    /// Points received after convergence, used only to detect a changed surface.
    pub recent: VecDeque<WorldPoint>,
    since_fit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeContent {
    Buffer(PointBuffer),
    Plane(Box<PlaneLeaf>),
    Children(Box<[OctreeNode; 8]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OctreeNode {
    pub depth: u8,
    pub center: Vec3,
    pub half_size: f64,
    pub content: NodeContent,
}

/// What [`update_plane`] did with a batch of points.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafEvent {
    /// Points stored; no refit due yet.
    Accumulated,
    Refit,
    /// Refit and froze the plane.
    Converged,
    /// Frozen plane, new points consistent or not yet conclusive.
    Frozen,
    /// The surface changed or stopped being planar; the leaf must be rebuilt from these points.
    Rebuild(Vec<WorldPoint>),
}

/// Counts of what an insertion did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InsertReport {
    pub inserted: usize,
    pub roots_created: usize,
    pub planes_created: usize,
    pub planes_updated: usize,
    pub planes_converged: usize,
    pub rebuilt: usize,
    pub subdivided: usize,
    /// Max-depth buffers that were fitted and found non-planar.
    pub saturated: usize,
}

/// Best plane for a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchCandidate<'a> {
    pub plane: &'a PlaneFeature,
    /// Signed point-to-plane distance, m.
    pub distance: f64,
    /// Gate variance of the distance, m².
    pub variance: f64,
}

impl MatchCandidate<'_> {
    pub fn normalized(&self) -> f64 {
        self.distance.abs() / self.variance.sqrt()
    }
}

/// A plane leaf together with its placement, for inspection.
#[derive(Debug, Clone, Copy)]
pub struct PlaneInfo<'a> {
    pub key: VoxelKey,
    pub depth: u8,
    pub center: Vec3,
    pub half_size: f64,
    pub converged: bool,
    pub plane: &'a PlaneFeature,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MapStats {
    pub roots: usize,
    pub leaves: usize,
    pub planes: usize,
    pub converged_planes: usize,
    pub buffered_points: usize,
    /// Plane leaves per depth.
    pub depth_histogram: Vec<usize>,
}

fn angle_between_normals(a: &Vec3, b: &Vec3) -> f64 {
    a.dot(b).abs().min(1.0).acos()
}

/// Feeds new points into a plane leaf.
///
/// Before convergence the plane is refitted every `update_batch` points from all of its
/// points. After convergence new points go to a bounded ring; once it holds enough of
/// them a temporary plane is fitted and a normal change beyond the threshold requests
/// a rebuild.
pub fn update_plane(
    leaf: &mut PlaneLeaf,
    new_points: &[WorldPoint],
    viewpoint: &Vec3,
    cfg: &VoxelMapConfig,
) -> LeafEvent {
    leaf.since_fit += new_points.len();
    if leaf.converged {
        for p in new_points {
            if leaf.recent.len() == cfg.max_buffer_points {
                leaf.recent.pop_front();
            }
            leaf.recent.push_back(*p);
        }
        if leaf.since_fit < cfg.update_batch || leaf.recent.len() < cfg.min_points {
            return LeafEvent::Frozen;
        }
        leaf.since_fit = 0;
        let recent: Vec<WorldPoint> = leaf.recent.iter().copied().collect();
        if let Ok(PlaneFit::Plane(fresh)) = fit_plane(&recent, viewpoint, &cfg.plane) {
            if angle_between_normals(&fresh.normal, &leaf.plane.normal) > cfg.normal_change_thresh {
                return LeafEvent::Rebuild(recent);
            }
        }
        return LeafEvent::Frozen;
    }
    leaf.points.extend_from_slice(new_points);
    if leaf.since_fit < cfg.update_batch {
        return LeafEvent::Accumulated;
    }
    leaf.since_fit = 0;
    match fit_plane(&leaf.points, viewpoint, &cfg.plane) {
        Ok(PlaneFit::Plane(p)) => {
            leaf.plane = p;
            if p.cov.trace() < cfg.plane_converged_trace || leaf.points.len() >= cfg.max_plane_points {
                leaf.converged = true;
                leaf.points = Vec::new();
                LeafEvent::Converged
            } else {
                LeafEvent::Refit
            }
        }
        _ => LeafEvent::Rebuild(std::mem::take(&mut leaf.points)),
    }
}

impl OctreeNode {
    fn new(depth: u8, center: Vec3, half_size: f64) -> Self {
        OctreeNode {
            depth,
            center,
            half_size,
            content: NodeContent::Buffer(PointBuffer { points: Vec::new(), since_fit: 0, attempted: false }),
        }
    }

    fn octant(center: &Vec3, p: &Vec3) -> usize {
        (p.x >= center.x) as usize | ((p.y >= center.y) as usize) << 1 | ((p.z >= center.z) as usize) << 2
    }

    fn children(&self) -> Box<[OctreeNode; 8]> {
        let h = 0.5 * self.half_size;
        Box::new(std::array::from_fn(|i| {
            let s = |bit: usize| if i & bit != 0 { h } else { -h };
            OctreeNode::new(self.depth + 1, self.center + Vec3::new(s(1), s(2), s(4)), h)
        }))
    }

    /// Whether `p` lies in this node's half-open cube.
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.center[i] - self.half_size && p[i] < self.center[i] + self.half_size)
    }

    fn insert(&mut self, points: Vec<WorldPoint>, viewpoint: &Vec3, cfg: &VoxelMapConfig, report: &mut InsertReport) {
        if points.is_empty() {
            return;
        }
        match &mut self.content {
            NodeContent::Children(children) => {
                let mut parts: [Vec<WorldPoint>; 8] = Default::default();
                for p in points {
                    parts[Self::octant(&self.center, &p.p)].push(p);
                }
                for (child, part) in children.iter_mut().zip(parts) {
                    child.insert(part, viewpoint, cfg, report);
                }
            }
            NodeContent::Buffer(buf) => {
                buf.since_fit += points.len();
                buf.points.extend(points);
                if self.depth >= cfg.max_depth {
                    buf.trim(cfg.max_buffer_points);
                }
                self.classify(viewpoint, cfg, report);
                if let NodeContent::Buffer(buf) = &mut self.content {
                    buf.trim(cfg.max_buffer_points);
                }
            }
            NodeContent::Plane(leaf) => match update_plane(leaf, &points, viewpoint, cfg) {
                LeafEvent::Refit => report.planes_updated += 1,
                LeafEvent::Converged => {
                    report.planes_updated += 1;
                    report.planes_converged += 1;
                }
                LeafEvent::Rebuild(pts) => {
                    report.rebuilt += 1;
                    self.content =
                        NodeContent::Buffer(PointBuffer { since_fit: pts.len(), points: pts, attempted: false });
                    self.classify(viewpoint, cfg, report);
                }
                LeafEvent::Accumulated | LeafEvent::Frozen => {}
            },
        }
    }

    /// Fits a buffer that has enough points: it becomes a plane, splits, or stays buffered.
    fn classify(&mut self, viewpoint: &Vec3, cfg: &VoxelMapConfig, report: &mut InsertReport) {
        let NodeContent::Buffer(buf) = &mut self.content else {
            return;
        };
        if buf.points.len() < cfg.min_points || (buf.attempted && buf.since_fit < cfg.update_batch) {
            return;
        }
        buf.attempted = true;
        buf.since_fit = 0;
        match fit_plane(&buf.points, viewpoint, &cfg.plane) {
            Ok(PlaneFit::Plane(plane)) => {
                report.planes_created += 1;
                let points = std::mem::take(&mut buf.points);
                let converged = plane.cov.trace() < cfg.plane_converged_trace || points.len() >= cfg.max_plane_points;
                if converged {
                    report.planes_converged += 1;
                }
                self.content = NodeContent::Plane(Box::new(PlaneLeaf {
                    plane,
                    points: if converged { Vec::new() } else { points },
                    converged,
                    recent: VecDeque::new(),
                    since_fit: 0,
                }));
            }
            // A thin line of points (one scan ring) fails the ratio test without showing
            // any bend; it stays undecided until points arrive off the line.
            Ok(PlaneFit::NotPlanar(sc)) if is_line_like(&sc.eigenvalues, &cfg.plane) => {}
            // Early verdicts rest on few points; only a full buffer may split.
            _ if buf.points.len() < cfg.max_buffer_points => {}
            _ if self.depth < cfg.max_depth => {
                report.subdivided += 1;
                let points = std::mem::take(&mut buf.points);
                self.content = NodeContent::Children(self.children());
                self.insert(points, viewpoint, cfg, report);
            }
            _ => report.saturated += 1,
        }
    }

    fn visit<'a, F: FnMut(&'a OctreeNode)>(&'a self, f: &mut F) {
        f(self);
        if let NodeContent::Children(ch) = &self.content {
            for c in ch.iter() {
                c.visit(f);
            }
        }
    }
}

/// The map: root voxels keyed by integer cell, each refined into an octree.
#[derive(Debug, Clone)]
pub struct VoxelMap {
    pub config: VoxelMapConfig,
    roots: KeyMap<OctreeNode>,
}

impl VoxelMap {
    pub fn new(config: VoxelMapConfig) -> Self {
        VoxelMap { config, roots: KeyMap::default() }
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }

    pub fn root(&self, key: &VoxelKey) -> Option<&OctreeNode> {
        self.roots.get(key)
    }

    /// Routes points to their root voxels (in key order, for determinism) and updates
    /// the affected octrees. `origin` is the sensor position the points were seen from.
    pub fn insert_points(&mut self, points: &[WorldPoint], origin: &Vec3) -> InsertReport {
        let cfg = self.config;
        let mut report = InsertReport { inserted: points.len(), ..Default::default() };
        let mut groups: BTreeMap<VoxelKey, Vec<WorldPoint>> = BTreeMap::new();
        for p in points.iter().filter(|p| p.p.iter().all(|v| v.is_finite())) {
            groups.entry(VoxelKey::from_point(&p.p, cfg.root_size)).or_default().push(*p);
        }
        for (key, pts) in groups {
            let node = self.roots.entry(key).or_insert_with(|| {
                report.roots_created += 1;
                OctreeNode::new(0, key.center(cfg.root_size), 0.5 * cfg.root_size)
            });
            node.insert(pts, origin, &cfg, &mut report);
        }
        report
    }

    /// Most probable plane for `wp` among the plane leaves of its root voxel (and the
    /// face neighbours when enabled), gated at three standard deviations.
    pub fn query_match<'a>(&'a self, wp: &WorldPoint) -> Option<MatchCandidate<'a>> {
        let key = VoxelKey::from_point(&wp.p, self.config.root_size);
        let mut best: Option<MatchCandidate<'a>> = None;
        let mut consider = |node: &'a OctreeNode| {
            node.visit(&mut |n| {
                if let NodeContent::Plane(leaf) = &n.content {
                    let plane = &leaf.plane;
                    let distance = plane.distance(&wp.p);
                    let variance = residual_variance(plane, wp).max(f64::MIN_POSITIVE);
                    if distance.abs() <= 3.0 * variance.sqrt() {
                        let cand = MatchCandidate { plane, distance, variance };
                        if best.is_none_or(|b| cand.normalized() < b.normalized()) {
                            best = Some(cand);
                        }
                    }
                }
            })
        };
        if let Some(node) = self.roots.get(&key) {
            consider(node);
        }
        if self.config.search_neighbors {
            for k in key.face_neighbors() {
                if let Some(node) = self.roots.get(&k) {
                    consider(node);
                }
            }
        }
        best
    }

    fn sorted_roots(&self) -> Vec<(&VoxelKey, &OctreeNode)> {
        let mut v: Vec<_> = self.roots.iter().collect();
        v.sort_by_key(|(k, _)| **k);
        v
    }

    /// The leaf whose cube contains `p`, if its root voxel exists.
    pub fn leaf_at(&self, p: &Vec3) -> Option<&OctreeNode> {
        let mut node = self.roots.get(&VoxelKey::from_point(p, self.config.root_size))?;
        while let NodeContent::Children(ch) = &node.content {
            node = &ch[OctreeNode::octant(&node.center, p)];
        }
        Some(node)
    }

    /// All plane leaves, ordered by root key then octree traversal order.
    pub fn planes(&self) -> Vec<PlaneInfo<'_>> {
        let mut out = Vec::new();
        for (key, root) in self.sorted_roots() {
            root.visit(&mut |n| {
                if let NodeContent::Plane(leaf) = &n.content {
                    out.push(PlaneInfo {
                        key: *key,
                        depth: n.depth,
                        center: n.center,
                        half_size: n.half_size,
                        converged: leaf.converged,
                        plane: &leaf.plane,
                    });
                }
            });
        }
        out
    }

    /// Visits every node of every root, roots in key order.
    pub fn for_each_node<F: FnMut(&VoxelKey, &OctreeNode)>(&self, mut f: F) {
        for (key, root) in self.sorted_roots() {
            root.visit(&mut |n| f(key, n));
        }
    }

    pub fn stats(&self) -> MapStats {
        let mut s = MapStats {
            roots: self.roots.len(),
            depth_histogram: vec![0; self.config.max_depth as usize + 1],
            ..Default::default()
        };
        self.for_each_node(|_, n| match &n.content {
            NodeContent::Buffer(b) => {
                s.leaves += 1;
                s.buffered_points += b.points.len();
            }
            NodeContent::Plane(l) => {
                s.leaves += 1;
                s.planes += 1;
                s.converged_planes += l.converged as usize;
                s.buffered_points += l.points.len() + l.recent.len();
                s.depth_histogram[n.depth as usize] += 1;
            }
            NodeContent::Children(_) => {}
        });
        s
    }

    /// Line-oriented `key=value` statistics.
    pub fn dump_stats(&self) -> String {
        let s = self.stats();
        let mut out = String::new();
        let _ = writeln!(out, "roots={}", s.roots);
        let _ = writeln!(out, "leaves={}", s.leaves);
        let _ = writeln!(out, "planes={}", s.planes);
        let _ = writeln!(out, "converged_planes={}", s.converged_planes);
        let _ = writeln!(out, "buffered_points={}", s.buffered_points);
        for (d, c) in s.depth_histogram.iter().enumerate() {
            let _ = writeln!(out, "planes_depth_{d}={c}");
        }
        out
    }
}
