//! Geometric evaluation: nose-tip cropping, nearest-surface queries,
//! similarity ICP and RMSE metrics, OBJ mesh I/O.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vec3;

/// Triangle meshes with more triangles than this use the BVH.
pub const BRUTE_FORCE_LIMIT: usize = 10_000;
pub const DEFAULT_CROP_RADIUS_MM: f64 = 95.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub nose_tip: Option<usize>,
}

impl Mesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>, nose_tip: Option<usize>) -> Result<Self> {
        let m = Mesh {
            vertices,
            triangles,
            nose_tip,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertices.len();
        for tri in &self.triangles {
            for &i in tri {
                if i >= v {
                    return Err(Error::IndexOutOfRange {
                        what: "triangle vertex",
                        index: i,
                        limit: v,
                    });
                }
            }
        }
        if let Some(n) = self.nose_tip {
            if n >= v {
                return Err(Error::IndexOutOfRange {
                    what: "nose tip",
                    index: n,
                    limit: v,
                });
            }
        }
        if self.vertices.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidInput("mesh has non-finite vertices".into()));
        }
        Ok(())
    }

    pub fn transformed(&self, t: &Similarity) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(|p| t.apply(p)).collect(),
            ..self.clone()
        }
    }

    pub fn nose_tip_position(&self) -> Option<Vec3> {
        self.nose_tip.map(|i| self.vertices[i])
    }
}

/// Keeps vertices within `radius` of `center` and triangles whose three
/// vertices are all kept, reindexed in original order.
pub fn crop_mesh(mesh: &Mesh, center: &Vec3, radius: f64) -> Result<Mesh> {
    let r2 = radius * radius;
    let mut remap = vec![usize::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    for (i, p) in mesh.vertices.iter().enumerate() {
        if (p - center).norm_squared() <= r2 {
            remap[i] = vertices.len();
            vertices.push(*p);
        }
    }
    if vertices.is_empty() {
        return Err(Error::Empty(format!("no vertex within {radius} mm of the crop center")));
    }
    let triangles = mesh
        .triangles
        .iter()
        .filter(|t| t.iter().all(|&i| remap[i] != usize::MAX))
        .map(|t| t.map(|i| remap[i]))
        .collect();
    let nose_tip = mesh.nose_tip.and_then(|i| (remap[i] != usize::MAX).then(|| remap[i]));
    Ok(Mesh {
        vertices,
        triangles,
        nose_tip,
    })
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub point: Vec3,
    pub triangle: usize,
    pub distance_sq: f64,
}

impl SurfaceHit {
    /// Smaller distance wins; equal distances go to the lower triangle index.
    fn better_than(&self, other: &SurfaceHit) -> bool {
        self.distance_sq < other.distance_sq
            || (self.distance_sq == other.distance_sq && self.triangle < other.triangle)
    }
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn distance_sq(&self, p: &Vec3) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let e = (self.min[k] - p[k]).max(0.0).max(p[k] - self.max[k]);
            d += e * e;
        }
        d
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

const LEAF_SIZE: usize = 4;

/// Bounding-volume hierarchy over triangles, median split on the longest
/// centroid axis.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

impl Bvh {
    pub fn build(mesh: &Mesh) -> Self {
        let centroids: Vec<Vec3> = mesh
            .triangles
            .iter()
            .map(|t| (mesh.vertices[t[0]] + mesh.vertices[t[1]] + mesh.vertices[t[2]]) / 3.0)
            .collect();
        let mut bvh = Bvh {
            nodes: Vec::new(),
            order: (0..mesh.triangles.len()).collect(),
        };
        if !mesh.triangles.is_empty() {
            bvh.build_node(mesh, &centroids, 0, mesh.triangles.len());
        }
        bvh
    }

    fn build_node(&mut self, mesh: &Mesh, centroids: &[Vec3], start: usize, end: usize) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &t in &self.order[start..end] {
            for &i in &mesh.triangles[t] {
                bounds.grow(&mesh.vertices[i]);
            }
            cbounds.grow(&centroids[t]);
        }
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { bounds, start, end });
            return id;
        }
        self.nodes.push(Node::Leaf { bounds, start, end });
        let extent = cbounds.max - cbounds.min;
        let axis = if extent.x >= extent.y && extent.x >= extent.z {
            0
        } else if extent.y >= extent.z {
            1
        } else {
            2
        };
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b))
        });
        let left = self.build_node(mesh, centroids, start, mid);
        let right = self.build_node(mesh, centroids, mid, end);
        self.nodes[id] = Node::Inner { bounds, left, right };
        id
    }

    pub fn nearest(&self, mesh: &Mesh, p: &Vec3) -> Option<SurfaceHit> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<SurfaceHit> = None;
        let mut stack = vec![(self.nodes[0].bounds().distance_sq(p), 0usize)];
        while let Some((d, id)) = stack.pop() {
            if best.is_some_and(|b| d > b.distance_sq) {
                continue;
            }
            match &self.nodes[id] {
                Node::Leaf { start, end, .. } => {
                    for &t in &self.order[*start..*end] {
                        let hit = triangle_hit(mesh, t, p);
                        if best.is_none_or(|b| hit.better_than(&b)) {
                            best = Some(hit);
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[*left].bounds().distance_sq(p);
                    let dr = self.nodes[*right].bounds().distance_sq(p);
                    // Push the farther child first so the nearer is visited next.
                    if dl <= dr {
                        stack.push((dr, *right));
                        stack.push((dl, *left));
                    } else {
                        stack.push((dl, *left));
                        stack.push((dr, *right));
                    }
                }
            }
        }
        best
    }
}

fn triangle_hit(mesh: &Mesh, t: usize, p: &Vec3) -> SurfaceHit {
    let [a, b, c] = mesh.triangles[t].map(|i| mesh.vertices[i]);
    let q = closest_point_on_triangle(p, &a, &b, &c);
    SurfaceHit {
        point: q,
        triangle: t,
        distance_sq: (p - q).norm_squared(),
    }
}

/// Exhaustive nearest surface point over all triangles.
pub fn nearest_surface_brute(mesh: &Mesh, p: &Vec3) -> Option<SurfaceHit> {
    let mut best: Option<SurfaceHit> = None;
    for t in 0..mesh.triangles.len() {
        let hit = triangle_hit(mesh, t, p);
        if best.is_none_or(|b| hit.better_than(&b)) {
            best = Some(hit);
        }
    }
    best
}

/// Nearest-surface queries against one mesh, brute force for small meshes
/// and BVH above [`BRUTE_FORCE_LIMIT`] triangles.
#[derive(Debug, Clone)]
pub struct SurfaceIndex<'a> {
    mesh: &'a Mesh,
    bvh: Option<Bvh>,
}

impl<'a> SurfaceIndex<'a> {
    pub fn new(mesh: &'a Mesh) -> Result<Self> {
        if mesh.triangles.is_empty() {
            return Err(Error::Empty("target mesh has no triangles".into()));
        }
        let bvh = (mesh.triangles.len() > BRUTE_FORCE_LIMIT).then(|| Bvh::build(mesh));
        Ok(SurfaceIndex { mesh, bvh })
    }

    pub fn with_bvh(mesh: &'a Mesh) -> Result<Self> {
        if mesh.triangles.is_empty() {
            return Err(Error::Empty("target mesh has no triangles".into()));
        }
        Ok(SurfaceIndex {
            mesh,
            bvh: Some(Bvh::build(mesh)),
        })
    }

    pub fn nearest(&self, p: &Vec3) -> SurfaceHit {
        match &self.bvh {
            Some(b) => b.nearest(self.mesh, p),
            None => nearest_surface_brute(self.mesh, p),
        }
        .expect("index is never built on an empty mesh")
    }

    pub fn nearest_all(&self, points: &[Vec3]) -> Vec<SurfaceHit> {
        points.par_iter().map(|p| self.nearest(p)).collect()
    }

    pub fn triangle_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.mesh.triangles[t].map(|i| self.mesh.vertices[i]);
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// Per-point `|(p − q)·n|` where `q` is the nearest target surface point and
/// `n` the unit normal of its triangle.
pub fn point_to_plane_distances(source: &[Vec3], target: &Mesh) -> Result<Vec<f64>> {
    let index = SurfaceIndex::new(target)?;
    Ok(index
        .nearest_all(source)
        .iter()
        .zip(source)
        .map(|(h, p)| (p - h.point).dot(&index.triangle_normal(h.triangle)).abs())
        .collect())
}

pub fn point_to_plane_rmse(source: &[Vec3], target: &Mesh) -> Result<f64> {
    Ok(rms(point_to_plane_distances(source, target)?.into_iter()))
}

/// Exact k-d tree over points for nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    /// Implicit balanced tree: `order[lo..hi]` with the median at the middle.
    order: Vec<usize>,
}

impl KdTree {
    pub fn build(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
        };
        let n = points.len();
        tree.build_range(0, n, 0);
        tree
    }

    fn build_range(&mut self, lo: usize, hi: usize, depth: usize) {
        if hi - lo <= 1 {
            return;
        }
        let axis = depth % 3;
        let mid = (lo + hi) / 2;
        let pts = &self.points;
        self.order[lo..hi]
            .select_nth_unstable_by(mid - lo, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        self.build_range(lo, mid, depth + 1);
        self.build_range(mid + 1, hi, depth + 1);
    }

    /// `(index, squared distance)`; ties go to the lower index.
    pub fn nearest(&self, p: &Vec3) -> Option<(usize, f64)> {
        let mut best = None;
        self.search(p, 0, self.points.len(), 0, &mut best);
        best
    }

    fn search(&self, p: &Vec3, lo: usize, hi: usize, depth: usize, best: &mut Option<(usize, f64)>) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let d = (self.points[idx] - p).norm_squared();
        if best.is_none_or(|(bi, bd)| d < bd || (d == bd && idx < bi)) {
            *best = Some((idx, d));
        }
        let axis = depth % 3;
        let diff = p[axis] - self.points[idx][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(p, near.0, near.1, depth + 1, best);
        if best.is_none_or(|(_, bd)| diff * diff <= bd) {
            self.search(p, far.0, far.1, depth + 1, best);
        }
    }
}

/// RMSE of nearest-neighbour distances from each source point to the target cloud.
pub fn point_to_point_rmse(source: &[Vec3], target: &[Vec3]) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Empty("target point cloud is empty".into()));
    }
    let tree = KdTree::build(target);
    let d: Vec<f64> = source
        .par_iter()
        .map(|p| tree.nearest(p).expect("non-empty tree").1.sqrt())
        .collect();
    Ok(rms(d.into_iter()))
}

/// `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Default for Similarity {
    fn default() -> Self {
        Similarity::identity()
    }
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Similarity) -> Similarity {
        Similarity {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
        }
    }

    pub fn inverse(&self) -> Similarity {
        let rt = self.rotation.transpose();
        Similarity {
            scale: 1.0 / self.scale,
            rotation: rt,
            translation: -(rt * self.translation) / self.scale,
        }
    }
}

/// Closed-form least-squares similarity with `dst ≈ s·R·src + t`.
pub fn umeyama(src: &[Vec3], dst: &[Vec3]) -> Result<Similarity> {
    umeyama_with(src, dst, true)
}

/// As [`umeyama`]; with `estimate_scale` off the fit is rigid (s = 1).
pub fn umeyama_with(src: &[Vec3], dst: &[Vec3], estimate_scale: bool) -> Result<Similarity> {
    crate::error::check_len("correspondences", src.len(), dst.len())?;
    if src.len() < 3 {
        return Err(Error::Degenerate(
            "similarity estimation needs at least 3 points".into(),
        ));
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if !(var_s > 1e-18) {
        return Err(Error::Degenerate("source points are coincident".into()));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let sv = svd.singular_values;
    // Rank below 2 means collinear points: rotation about the line is free.
    let max_sv = sv.max();
    let rank = sv.iter().filter(|v| **v > 1e-12 * max_sv.max(1e-300)).count();
    if rank < 2 {
        return Err(Error::Degenerate("correspondence covariance has rank < 2".into()));
    }
    let mut sign = Matrix3::identity();
    if (u.determinant() * vt.determinant()) < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let rotation = u * sign * vt;
    let trace = sv[0] * sign[(0, 0)] + sv[1] * sign[(1, 1)] + sv[2] * sign[(2, 2)];
    let scale = if estimate_scale { trace / var_s } else { 1.0 };
    let translation = mu_d - rotation * mu_s * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop when the trimmed RMSE changes by less than this (mm).
    pub tolerance: f64,
    /// Fraction of worst correspondences rejected per iteration.
    pub trim_fraction: f64,
    /// Off: rigid alignment only.
    pub estimate_scale: bool,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 100,
            tolerance: 1e-6,
            trim_fraction: 0.1,
            estimate_scale: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    /// Maps source points onto the target.
    pub transform: Similarity,
    pub rmse: f64,
    /// Trimmed RMSE per iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().sum::<Vec3>() / points.len() as f64
}

fn principal_axes(points: &[Vec3], c: &Vec3) -> (Matrix3<f64>, f64) {
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= points.len() as f64;
    let eig = SymmetricEigen::new(cov);
    // Sort axes by decreasing variance.
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Matrix3::zeros();
    for (k, &i) in idx.iter().enumerate() {
        axes.set_column(k, &eig.eigenvectors.column(i));
    }
    if axes.determinant() < 0.0 {
        axes.set_column(2, &(-axes.column(2)));
    }
    (axes, cov.trace().sqrt())
}

fn trimmed(distances: &mut [(f64, usize)], trim: f64) -> usize {
    distances.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = ((distances.len() as f64) * (1.0 - trim)).ceil() as usize;
    keep.clamp(3.min(distances.len()), distances.len())
}

/// Trimmed ICP with isotropic scale against the target surface. Starts
/// from the best of centroid-plus-scale alignment and the four proper
/// principal-axis alignments.
pub fn icp_isotropic(source: &[Vec3], target: &Mesh, config: &IcpConfig) -> Result<IcpResult> {
    if source.len() < 3 {
        return Err(Error::Degenerate("ICP needs at least 3 source points".into()));
    }
    if !(0.0..1.0).contains(&config.trim_fraction) {
        return Err(Error::InvalidInput(format!(
            "trim fraction {} not in [0, 1)",
            config.trim_fraction
        )));
    }
    let index = SurfaceIndex::new(target)?;
    let trimmed_rmse = |t: &Similarity| -> f64 {
        let moved: Vec<Vec3> = source.iter().map(|p| t.apply(p)).collect();
        let hits = index.nearest_all(&moved);
        let mut d: Vec<(f64, usize)> = hits.iter().enumerate().map(|(i, h)| (h.distance_sq, i)).collect();
        let keep = trimmed(&mut d, config.trim_fraction);
        (d[..keep].iter().map(|x| x.0).sum::<f64>() / keep as f64).sqrt()
    };

    let cs = centroid(source);
    let ct = centroid(&target.vertices);
    let (axes_s, spread_s) = principal_axes(source, &cs);
    let (axes_t, spread_t) = principal_axes(&target.vertices, &ct);
    if !(spread_s > 0.0) {
        return Err(Error::Degenerate("source points are coincident".into()));
    }
    let scale = if config.estimate_scale {
        spread_t / spread_s
    } else {
        1.0
    };
    let mut candidates = vec![Matrix3::identity()];
    for (a, b) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let flip = Matrix3::from_diagonal(&Vec3::new(a, b, a * b));
        candidates.push(axes_t * flip * axes_s.transpose());
    }
    let mut best_init: Option<(f64, Similarity)> = None;
    for rotation in candidates {
        let t = Similarity {
            scale,
            rotation,
            translation: ct - rotation * cs * scale,
        };
        let r = trimmed_rmse(&t);
        if best_init.is_none_or(|(b, _)| r < b) {
            best_init = Some((r, t));
        }
    }
    let mut current = best_init.expect("candidates are non-empty").1;

    let mut trace = Vec::new();
    let mut best = (f64::INFINITY, current);
    let mut converged = false;
    for _ in 0..config.max_iterations {
        let moved: Vec<Vec3> = source.iter().map(|p| current.apply(p)).collect();
        let hits = index.nearest_all(&moved);
        let mut d: Vec<(f64, usize)> = hits.iter().enumerate().map(|(i, h)| (h.distance_sq, i)).collect();
        let keep = trimmed(&mut d, config.trim_fraction);
        let rmse = (d[..keep].iter().map(|x| x.0).sum::<f64>() / keep as f64).sqrt();
        if rmse < best.0 {
            best = (rmse, current);
        }
        let previous = trace.last().copied();
        trace.push(rmse);
        if previous.is_some_and(|p: f64| (p - rmse).abs() < config.tolerance) || rmse == 0.0 {
            converged = true;
            break;
        }
        let src: Vec<Vec3> = d[..keep].iter().map(|&(_, i)| source[i]).collect();
        let dst: Vec<Vec3> = d[..keep].iter().map(|&(_, i)| hits[i].point).collect();
        current = umeyama_with(&src, &dst, config.estimate_scale)?;
    }
    Ok(IcpResult {
        transform: best.1,
        rmse: best.0,
        trace,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    PointToPlane,
    PointToPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub crop_radius: f64,
    pub icp: IcpConfig,
    pub metric: Metric,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            crop_radius: DEFAULT_CROP_RADIUS_MM,
            icp: IcpConfig::default(),
            metric: Metric::PointToPlane,
        }
    }
}

/// Crop both meshes around their nose tips, align the prediction to the
/// ground truth with ICP, then measure.
pub fn evaluate_prediction(predicted: &Mesh, truth: &Mesh, protocol: &EvalProtocol) -> Result<f64> {
    let crop = |m: &Mesh| -> Result<Mesh> {
        match m.nose_tip_position() {
            Some(c) => crop_mesh(m, &c, protocol.crop_radius),
            None => Ok(m.clone()),
        }
    };
    let gt = crop(truth)?;
    let pred = crop(predicted)?;
    let icp = icp_isotropic(&pred.vertices, &gt, &protocol.icp)?;
    let aligned: Vec<Vec3> = pred.vertices.iter().map(|p| icp.transform.apply(p)).collect();
    match protocol.metric {
        Metric::PointToPlane => point_to_plane_rmse(&aligned, &gt),
        Metric::PointToPoint => point_to_point_rmse(&aligned, &gt.vertices),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectError {
    pub name: String,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_subject: Vec<SubjectError>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    pub fn from_errors(per_subject: Vec<SubjectError>) -> Self {
        let (mean, std) = mean_std(per_subject.iter().map(|s| s.rmse));
        EvalReport { per_subject, mean, std }
    }
}

/// Mean and population standard deviation; zeros for an empty input.
pub fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean Euclidean distance between corresponding vertices.
pub fn mean_vertex_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    crate::error::check_len("vertices", a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Empty("no vertices to compare".into()));
    }
    Ok(a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum::<f64>() / a.len() as f64)
}

pub fn write_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    if let Some(n) = mesh.nose_tip {
        out.push_str(&format!("# nose_tip {n}\n"));
    }
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    crate::write_atomic(path, out.as_bytes())
}

pub fn read_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut nose_tip = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let bad = |msg: String| Error::parse(path, format!("line {}: {msg}", lineno + 1));
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>().map_err(|e| bad(format!("bad coordinate {s:?}: {e}"))))
                    .collect::<Result<_>>()?;
                if c.len() != 3 {
                    return Err(bad("vertex needs 3 coordinates".into()));
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|s| {
                        let first = s.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|e| bad(format!("bad face index {s:?}: {e}")))?;
                        let n = vertices.len() as i64;
                        let resolved = if i < 0 { n + i } else { i - 1 };
                        if resolved < 0 || resolved >= n {
                            return Err(bad(format!("face index {i} out of range for {n} vertices")));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(bad("face needs at least 3 vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            Some("#") => {
                let rest: Vec<&str> = it.collect();
                if rest.len() == 2 && rest[0] == "nose_tip" {
                    nose_tip = Some(rest[1].parse().map_err(|e| bad(format!("bad nose tip: {e}")))?);
                }
            }
            _ => {}
        }
    }
    Mesh::new(vertices, triangles, nose_tip)
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(report)?;
    buf.write_all(b"\n").expect("writing to a Vec cannot fail");
    crate::write_atomic(path.as_ref(), &buf)
}
