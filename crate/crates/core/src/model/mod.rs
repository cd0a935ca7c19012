//! The linear morphable face model: container, shape/texture evaluation and
//! vertex normals.

mod container;
mod toy;

pub use container::{load_model, read_model, save_model, write_model, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use toy::{synthesize_toy_model, INNER_MOUTH_LANDMARKS, LANDMARK_COUNT, NOSE_LANDMARKS};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::scene::Pose;

pub type Vec3 = Vector3<f64>;

/// Landmark weight for nose and inner-mouth points; every other landmark uses 1.
pub const EMPHASIZED_LANDMARK_WEIGHT: f64 = 20.0;

/// Dense column-major `rows × cols` basis matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Basis {
    pub fn from_column_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("basis data", rows * cols, data.len())?;
        Ok(Basis { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Basis {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.data[k * self.rows..(k + 1) * self.rows]
    }

    pub fn column_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.rows..(k + 1) * self.rows]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `out += B · coeffs`.
    pub fn accumulate(&self, coeffs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(coeffs.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (k, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(self.column(k)) {
                *o += c * b;
            }
        }
    }

    /// `Bᵀ · v`.
    pub fn transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        (0..self.cols)
            .map(|k| self.column(k).iter().zip(v).map(|(b, x)| b * x).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub vertex: usize,
    pub weight: f64,
}

/// Mean shape/texture, std-dev scaled PCA bases, topology and annotations.
///
/// Shapes are in millimeters, albedo in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    pub mean_shape: Vec<f64>,
    pub mean_texture: Vec<f64>,
    pub basis_id: Basis,
    pub basis_exp: Basis,
    pub basis_tex: Basis,
    pub triangles: Vec<[usize; 3]>,
    pub landmarks: Vec<Landmark>,
    pub skin_region: Vec<usize>,
    pub nose_tip: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vertices: usize,
    pub id: usize,
    pub exp: usize,
    pub tex: usize,
}

impl ModelDims {
    /// Dimensions of the full-scale model: 80 identity, 64 expression, 80 texture.
    pub const PAPER: ModelDims = ModelDims {
        vertices: 36_000,
        id: 80,
        exp: 64,
        tex: 80,
    };

    pub fn coefficient_len(&self) -> usize {
        self.id + self.exp + self.tex + SH_COEFFS + POSE_PARAMS
    }
}

pub const SH_COEFFS: usize = 9;
pub const POSE_PARAMS: usize = 6;

impl MorphableModel {
    pub fn vertex_count(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vertices: self.vertex_count(),
            id: self.basis_id.cols(),
            exp: self.basis_exp.cols(),
            tex: self.basis_tex.cols(),
        }
    }

    pub fn landmark_weights(&self) -> Vec<f64> {
        self.landmarks.iter().map(|l| l.weight).collect()
    }

    /// Checks every structural invariant of the container.
    pub fn validate(&self) -> Result<()> {
        if !self.mean_shape.len().is_multiple_of(3) {
            return Err(Error::InvariantViolation(format!(
                "mean shape length {} is not a multiple of 3",
                self.mean_shape.len()
            )));
        }
        let v = self.vertex_count();
        check_len("mean texture", 3 * v, self.mean_texture.len())?;
        check_len("identity basis rows", 3 * v, self.basis_id.rows())?;
        check_len("expression basis rows", 3 * v, self.basis_exp.rows())?;
        check_len("texture basis rows", 3 * v, self.basis_tex.rows())?;
        for tri in &self.triangles {
            for &i in tri {
                if i >= v {
                    return Err(Error::IndexOutOfRange {
                        what: "triangle",
                        index: i,
                        limit: v,
                    });
                }
            }
        }
        for lm in &self.landmarks {
            if lm.vertex >= v {
                return Err(Error::IndexOutOfRange {
                    what: "landmark",
                    index: lm.vertex,
                    limit: v,
                });
            }
            if !(lm.weight > 0.0) || !lm.weight.is_finite() {
                return Err(Error::InvariantViolation(format!(
                    "landmark weight {} is not positive",
                    lm.weight
                )));
            }
        }
        for &i in &self.skin_region {
            if i >= v {
                return Err(Error::IndexOutOfRange {
                    what: "skin region",
                    index: i,
                    limit: v,
                });
            }
        }
        if self.nose_tip >= v {
            return Err(Error::IndexOutOfRange {
                what: "nose tip",
                index: self.nose_tip,
                limit: v,
            });
        }
        if let Some(t) = self.mean_texture.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvariantViolation(format!(
                "mean texture value {t} outside [0, 1]"
            )));
        }
        Ok(())
    }

    /// `S = S̄ + B_id·α + B_exp·β` as `V` points.
    pub fn evaluate_shape(&self, alpha: &[f64], beta: &[f64]) -> Result<Vec<Vec3>> {
        check_len("alpha", self.basis_id.cols(), alpha.len())?;
        check_len("beta", self.basis_exp.cols(), beta.len())?;
        let mut flat = self.mean_shape.clone();
        self.basis_id.accumulate(alpha, &mut flat);
        self.basis_exp.accumulate(beta, &mut flat);
        Ok(to_points(&flat))
    }

    /// Neutral (expression-free) shape for identity coefficients.
    pub fn neutral_shape(&self, alpha: &[f64]) -> Result<Vec<Vec3>> {
        self.evaluate_shape(alpha, &vec![0.0; self.basis_exp.cols()])
    }

    /// `T = T̄ + B_t·δ`, clamped to `[0, 1]`.
    pub fn evaluate_texture(&self, delta: &[f64]) -> Result<Texture> {
        check_len("delta", self.basis_tex.cols(), delta.len())?;
        let mut flat = self.mean_texture.clone();
        self.basis_tex.accumulate(delta, &mut flat);
        let raw = to_points(&flat);
        let mut clamped_count = 0;
        let albedo = raw
            .iter()
            .map(|t| {
                t.map(|c| {
                    let k = c.clamp(0.0, 1.0);
                    if k != c {
                        clamped_count += 1;
                    }
                    k
                })
            })
            .collect();
        Ok(Texture {
            raw,
            albedo,
            clamped_count,
        })
    }
}

/// Per-vertex albedo before and after clamping.
#[derive(Debug, Clone)]
pub struct Texture {
    pub raw: Vec<Vec3>,
    pub albedo: Vec<Vec3>,
    /// Number of channel values that fell outside `[0, 1]`.
    pub clamped_count: usize,
}

pub fn to_points(flat: &[f64]) -> Vec<Vec3> {
    flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect()
}

pub fn flatten_points(points: &[Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

/// Full unknown vector `x = (α, β, δ, γ, p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub delta: Vec<f64>,
    pub gamma: [f64; SH_COEFFS],
    pub pose: Pose,
}

/// The five parameter groups of a [`CoefficientVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Block {
    Identity,
    Expression,
    Texture,
    Lighting,
    Pose,
}

impl Block {
    pub const ALL: [Block; 5] = [
        Block::Identity,
        Block::Expression,
        Block::Texture,
        Block::Lighting,
        Block::Pose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Identity => "alpha",
            Block::Expression => "beta",
            Block::Texture => "delta",
            Block::Lighting => "gamma",
            Block::Pose => "pose",
        }
    }
}

impl CoefficientVector {
    pub fn zeros(dims: ModelDims) -> Self {
        CoefficientVector {
            alpha: vec![0.0; dims.id],
            beta: vec![0.0; dims.exp],
            delta: vec![0.0; dims.tex],
            gamma: [0.0; SH_COEFFS],
            pose: Pose::identity(),
        }
    }

    pub fn dims_match(&self, dims: ModelDims) -> Result<()> {
        check_len("alpha", dims.id, self.alpha.len())?;
        check_len("beta", dims.exp, self.beta.len())?;
        check_len("delta", dims.tex, self.delta.len())
    }

    pub fn len(&self) -> usize {
        self.alpha.len() + self.beta.len() + self.delta.len() + SH_COEFFS + POSE_PARAMS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index ranges of each block inside the flat vector.
    pub fn block_ranges(dims: ModelDims) -> [(Block, std::ops::Range<usize>); 5] {
        let a = dims.id;
        let b = a + dims.exp;
        let d = b + dims.tex;
        let g = d + SH_COEFFS;
        [
            (Block::Identity, 0..a),
            (Block::Expression, a..b),
            (Block::Texture, b..d),
            (Block::Lighting, d..g),
            (Block::Pose, g..g + POSE_PARAMS),
        ]
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.alpha);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.delta);
        out.extend_from_slice(&self.gamma);
        out.extend_from_slice(&self.pose.to_array());
        out
    }

    pub fn unflatten(flat: &[f64], dims: ModelDims) -> Result<Self> {
        check_len("coefficient vector", dims.coefficient_len(), flat.len())?;
        let [(_, a), (_, b), (_, d), (_, g), (_, p)] = Self::block_ranges(dims);
        let mut gamma = [0.0; SH_COEFFS];
        gamma.copy_from_slice(&flat[g]);
        let mut pose = [0.0; POSE_PARAMS];
        pose.copy_from_slice(&flat[p]);
        Ok(CoefficientVector {
            alpha: flat[a].to_vec(),
            beta: flat[b].to_vec(),
            delta: flat[d].to_vec(),
            gamma,
            pose: Pose::from_array(pose),
        })
    }
}

/// Unit vertex normals plus the unnormalized area-weighted sums they came from.
#[derive(Debug, Clone)]
pub struct VertexNormals {
    pub normals: Vec<Vec3>,
    pub accumulated: Vec<Vec3>,
    /// Vertices with no incident area; they fall back to `(0, 0, 1)`.
    pub degenerate: Vec<usize>,
}

const DEGENERATE_NORM: f64 = 1e-300;

/// Area-weighted vertex normals (sum of un-normalized face cross products).
pub fn vertex_normals(positions: &[Vec3], triangles: &[[usize; 3]]) -> VertexNormals {
    let mut accumulated = vec![Vec3::zeros(); positions.len()];
    for &[a, b, c] in triangles {
        let n = (positions[b] - positions[a]).cross(&(positions[c] - positions[a]));
        accumulated[a] += n;
        accumulated[b] += n;
        accumulated[c] += n;
    }
    let mut degenerate = Vec::new();
    let normals = accumulated
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let len = m.norm();
            if len > DEGENERATE_NORM && len.is_finite() {
                m / len
            } else {
                degenerate.push(i);
                Vec3::z()
            }
        })
        .collect();
    VertexNormals {
        normals,
        accumulated,
        degenerate,
    }
}

/// Pulls a gradient on unit normals back onto vertex positions.
pub fn vertex_normals_backward(
    positions: &[Vec3],
    triangles: &[[usize; 3]],
    normals: &VertexNormals,
    grad_normals: &[Vec3],
) -> Vec<Vec3> {
    // d(m/|m|) = (I - n nᵀ) dm / |m|
    let grad_acc: Vec<Vec3> = normals
        .accumulated
        .iter()
        .zip(&normals.normals)
        .zip(grad_normals)
        .map(|((m, n), g)| {
            let len = m.norm();
            if len > DEGENERATE_NORM && len.is_finite() {
                (g - n * n.dot(g)) / len
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    let mut grad = vec![Vec3::zeros(); positions.len()];
    for &[a, b, c] in triangles {
        let g = grad_acc[a] + grad_acc[b] + grad_acc[c];
        if g == Vec3::zeros() {
            continue;
        }
        let e1 = positions[b] - positions[a];
        let e2 = positions[c] - positions[a];
        // n = e1 × e2; ∂/∂e1 (g·(e1×e2)) = e2 × g, ∂/∂e2 = g × e1
        let g1 = e2.cross(&g);
        let g2 = g.cross(&e1);
        grad[b] += g1;
        grad[c] += g2;
        grad[a] -= g1 + g2;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> MorphableModel {
        synthesize_toy_model(100, 8, 6, 8, 3).unwrap()
    }

    #[test]
    fn zero_coefficients_give_mean_shape() {
        let m = toy();
        let s = m.evaluate_shape(&[0.0; 8], &[0.0; 6]).unwrap();
        assert_eq!(flatten_points(&s), m.mean_shape);
    }

    #[test]
    fn unit_alpha_adds_first_column() {
        let m = toy();
        let mut a = vec![0.0; 8];
        a[0] = 1.0;
        let s = flatten_points(&m.evaluate_shape(&a, &[0.0; 6]).unwrap());
        for i in 0..s.len() {
            assert_eq!(s[i], m.mean_shape[i] + m.basis_id.column(0)[i]);
        }
    }

    #[test]
    fn shape_matches_naive_matmul() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let s = flatten_points(&m.evaluate_shape(&a, &b).unwrap());
        for r in 0..s.len() {
            let mut want = m.mean_shape[r];
            for k in 0..8 {
                want += m.basis_id.as_slice()[k * s.len() + r] * a[k];
            }
            for k in 0..6 {
                want += m.basis_exp.as_slice()[k * s.len() + r] * b[k];
            }
            assert!((s[r] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = toy();
        assert!(matches!(
            m.evaluate_shape(&[0.0; 7], &[0.0; 6]),
            Err(Error::DimensionMismatch { what: "alpha", .. })
        ));
        assert!(m.evaluate_texture(&[0.0; 3]).is_err());
    }

    #[test]
    fn texture_clamps_and_counts() {
        let m = toy();
        let t = m.evaluate_texture(&[0.0; 8]).unwrap();
        assert_eq!(t.clamped_count, 0);
        assert_eq!(flatten_points(&t.albedo), m.mean_texture);

        let col = m.basis_tex.column(0);
        let (idx, &val) = col
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap();
        let scale = 2.0 / val;
        let mut d = vec![0.0; 8];
        d[0] = scale;
        let t = m.evaluate_texture(&d).unwrap();
        assert!(t.clamped_count >= 1);
        assert_eq!(t.albedo[idx / 3][idx % 3], 1.0);
        assert!(t.raw[idx / 3][idx % 3] > 1.0);
    }

    #[test]
    fn texture_matches_naive_matmul_before_clamp() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = flatten_points(&m.evaluate_texture(&d).unwrap().raw);
        for r in 0..t.len() {
            let want: f64 = m.mean_texture[r]
                + (0..8)
                    .map(|k| m.basis_tex.as_slice()[k * t.len() + r] * d[k])
                    .sum::<f64>();
            assert!((t[r] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn single_triangle_normals() {
        let p = [Vec3::new(0., 0., 0.), Vec3::new(1., 0., 0.), Vec3::new(0., 1., 0.)];
        let n = vertex_normals(&p, &[[0, 1, 2]]);
        for v in &n.normals {
            assert_eq!(*v, Vec3::z());
        }
        assert!(n.degenerate.is_empty());
    }

    #[test]
    fn tetrahedron_normals_hand_computed() {
        // Regular tetrahedron with outward-wound faces.
        let p = [
            Vec3::new(1., 1., 1.),
            Vec3::new(1., -1., -1.),
            Vec3::new(-1., 1., -1.),
            Vec3::new(-1., -1., 1.),
        ];
        let tris = [[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
        let n = vertex_normals(&p, &tris);
        // Each vertex sees three congruent faces; their summed normal points
        // along the vertex direction from the centroid.
        for (i, v) in p.iter().enumerate() {
            let want = v / v.norm();
            assert!((n.normals[i] - want).norm() < 1e-12, "{i}: {:?}", n.normals[i]);
        }
    }

    #[test]
    fn isolated_vertex_falls_back_and_is_flagged() {
        let p = [
            Vec3::new(0., 0., 0.),
            Vec3::new(1., 0., 0.),
            Vec3::new(0., 1., 0.),
            Vec3::new(5., 5., 5.),
        ];
        let n = vertex_normals(&p, &[[0, 1, 2]]);
        assert_eq!(n.normals[3], Vec3::z());
        assert_eq!(n.degenerate, vec![3]);
    }

    #[test]
    fn normals_backward_matches_finite_differences() {
        let m = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pos = m.evaluate_shape(&[0.0; 8], &[0.0; 6]).unwrap();
        let weights: Vec<Vec3> = (0..pos.len())
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let f = |p: &[Vec3]| -> f64 {
            vertex_normals(p, &m.triangles)
                .normals
                .iter()
                .zip(&weights)
                .map(|(n, w)| n.dot(w))
                .sum()
        };
        let n = vertex_normals(&pos, &m.triangles);
        let g = vertex_normals_backward(&pos, &m.triangles, &n, &weights);
        let h = 1e-5;
        for v in (0..pos.len()).step_by(7) {
            for c in 0..3 {
                let mut p = pos.clone();
                p[v][c] += h;
                let fp = f(&p);
                p[v][c] -= 2.0 * h;
                let fm = f(&p);
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - g[v][c]).abs() / fd.abs().max(1e-3);
                assert!(err < 1e-4, "v{v} c{c}: fd {fd} an {}", g[v][c]);
            }
        }
    }

    #[test]
    fn coefficient_vector_round_trip_and_full_length() {
        assert_eq!(ModelDims::PAPER.coefficient_len(), 239);
        let dims = toy().dims();
        let mut x = CoefficientVector::zeros(dims);
        x.alpha[2] = 1.5;
        x.gamma[4] = -0.25;
        x.pose.translation[2] = 600.0;
        let flat = x.flatten();
        assert_eq!(flat.len(), dims.coefficient_len());
        assert_eq!(CoefficientVector::unflatten(&flat, dims).unwrap(), x);
    }

    #[test]
    fn validate_rejects_bad_indices() {
        let mut m = toy();
        m.triangles[0][1] = 100;
        assert!(matches!(
            m.validate(),
            Err(Error::IndexOutOfRange {
                what: "triangle",
                index: 100,
                ..
            })
        ));
    }
}
