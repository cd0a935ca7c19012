//! Deterministic synthetic face-like models for tests and benchmarks.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Basis, Landmark, MorphableModel, Vec3, EMPHASIZED_LANDMARK_WEIGHT};
use crate::error::{Error, Result};

pub const LANDMARK_COUNT: usize = 68;
/// Nose bridge and nostril points of the 68-point layout.
pub const NOSE_LANDMARKS: std::ops::RangeInclusive<usize> = 27..=35;
/// Inner-lip points of the 68-point layout.
pub const INNER_MOUTH_LANDMARKS: std::ops::RangeInclusive<usize> = 60..=67;

const SEMI_AXES: [f64; 3] = [75.0, 90.0, 80.0];
const NOSE_HEIGHT: f64 = 18.0;
const NOSE_WIDTH: f64 = 0.18;
const ID_STD_MM: f64 = 5.0;
const EXP_STD_MM: f64 = 3.0;
const TEX_STD: f64 = 0.04;
const SKIN_ALBEDO: [f64; 3] = [0.80, 0.60, 0.50];
const LIP_ALBEDO: [f64; 3] = [0.72, 0.42, 0.40];
const EYE_ALBEDO: [f64; 3] = [0.30, 0.24, 0.22];
const BROW_ALBEDO: [f64; 3] = [0.40, 0.28, 0.22];

/// Builds a hemispherical face-like shell of exactly `vertices` vertices,
/// facing `-z`, with smooth random bases.
pub fn synthesize_toy_model(
    vertices: usize,
    k_id: usize,
    k_exp: usize,
    k_tex: usize,
    seed: u64,
) -> Result<MorphableModel> {
    if vertices < 4 {
        return Err(Error::InvalidInput(format!(
            "toy model needs at least 4 vertices, got {vertices}"
        )));
    }
    if k_id == 0 || k_exp == 0 || k_tex == 0 {
        return Err(Error::InvalidInput("basis sizes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (dirs, triangles) = hemisphere_grid(vertices);
    let v = dirs.len();

    // Low-order random radial deformation so every seed gives a different mean.
    let wobble: [f64; 4] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
    let positions: Vec<Vec3> = dirs
        .iter()
        .map(|d| {
            let theta = (-d.z).clamp(-1.0, 1.0).acos();
            let bump = NOSE_HEIGHT * (-theta * theta / (2.0 * NOSE_WIDTH * NOSE_WIDTH)).exp();
            let radial = wobble[0] * d.x * d.x + wobble[1] * d.y + wobble[2] * d.x * d.y + wobble[3] * d.y * d.y;
            Vec3::new(SEMI_AXES[0] * d.x, SEMI_AXES[1] * d.y, SEMI_AXES[2] * d.z) + d * radial - Vec3::z() * bump
        })
        .collect();

    let mut triangles = triangles;
    for tri in triangles.iter_mut() {
        let [a, b, c] = *tri;
        let n = (positions[b] - positions[a]).cross(&(positions[c] - positions[a]));
        let centroid = (positions[a] + positions[b] + positions[c]) / 3.0;
        if n.dot(&centroid) < 0.0 {
            tri.swap(1, 2);
        }
    }

    let mean_shape = super::flatten_points(&positions);

    let mut id_cols: Vec<Vec<f64>> = (0..k_id).map(|_| smooth_field(&dirs, &mut rng, None)).collect();
    let lower_face = |d: &Vec3| d.y < -0.2;
    let mut exp_cols: Vec<Vec<f64>> = (0..k_exp)
        .map(|_| smooth_field(&dirs, &mut rng, Some(&lower_face)))
        .collect();
    {
        let mut all: Vec<&mut Vec<f64>> = id_cols.iter_mut().chain(exp_cols.iter_mut()).collect();
        orthonormalize(&mut all);
    }
    let scale_cols = |cols: Vec<Vec<f64>>, std: f64, decay: f64| -> Basis {
        let mut basis = Basis::zeros(3 * v, cols.len());
        for (k, col) in cols.into_iter().enumerate() {
            let s = std * decay.powi(k as i32) * (v as f64).sqrt();
            for (o, c) in basis.column_mut(k).iter_mut().zip(col) {
                *o = c * s;
            }
        }
        basis
    };
    let basis_id = scale_cols(id_cols, ID_STD_MM, 0.85);
    let basis_exp = scale_cols(exp_cols, EXP_STD_MM, 0.85);

    let mut tex_cols: Vec<Vec<f64>> = (0..k_tex).map(|_| smooth_field(&dirs, &mut rng, None)).collect();
    for col in tex_cols.iter_mut() {
        let n = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        col.iter_mut().for_each(|x| *x /= n);
    }
    let basis_tex = scale_cols(tex_cols, TEX_STD, 0.9);

    let template = landmark_template();
    let landmarks: Vec<Landmark> = template
        .iter()
        .enumerate()
        .map(|(n, &(x, y))| {
            let target = template_direction(x, y);
            let vertex = nearest_direction(&dirs, &target);
            let weight = if NOSE_LANDMARKS.contains(&n) || INNER_MOUTH_LANDMARKS.contains(&n) {
                EMPHASIZED_LANDMARK_WEIGHT
            } else {
                1.0
            };
            Landmark { vertex, weight }
        })
        .collect();

    let texture_noise = smooth_field(&dirs, &mut rng, None);
    let tex_norm = texture_noise.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut mean_texture = Vec::with_capacity(3 * v);
    for (i, d) in dirs.iter().enumerate() {
        let base = if in_mouth(d) {
            LIP_ALBEDO
        } else if in_eye(d) {
            EYE_ALBEDO
        } else if in_brow(d) {
            BROW_ALBEDO
        } else {
            SKIN_ALBEDO
        };
        for c in 0..3 {
            let jitter = 0.06 * texture_noise[3 * i + c] / tex_norm * (v as f64).sqrt();
            mean_texture.push((base[c] + jitter.clamp(-0.1, 0.1)).clamp(0.0, 1.0));
        }
    }

    let mut skin_region: Vec<usize> = dirs
        .iter()
        .enumerate()
        .filter(|(_, d)| -d.z > (60f64).to_radians().cos() && !in_mouth(d) && !in_eye(d) && !in_brow(d))
        .map(|(i, _)| i)
        .collect();
    if skin_region.len() < 2 {
        skin_region = (0..v).collect();
    }

    let model = MorphableModel {
        mean_shape,
        mean_texture,
        basis_id,
        basis_exp,
        basis_tex,
        triangles,
        landmarks,
        skin_region,
        nose_tip: 0,
    };
    model.validate()?;
    Ok(model)
}

/// Unit directions of a pole-plus-rings hemisphere (pole at `-z`) and its
/// triangulation. Vertex 0 is the pole.
fn hemisphere_grid(vertices: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let remaining = vertices - 1;
    let mut rings = ((PI * remaining as f64 / 8.0).sqrt().round() as usize).max(1);
    rings = rings.min(remaining / 3);
    let thetas: Vec<f64> = (1..=rings).map(|k| 0.5 * PI * k as f64 / rings as f64).collect();
    let weights: Vec<f64> = thetas.iter().map(|t| t.sin()).collect();
    let total_w: f64 = weights.iter().sum();
    let spare = remaining - 3 * rings;
    let shares: Vec<f64> = weights.iter().map(|w| spare as f64 * w / total_w).collect();
    let mut counts: Vec<usize> = shares.iter().map(|s| 3 + s.floor() as usize).collect();
    let mut leftover = remaining - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..rings).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[k] += 1;
        leftover -= 1;
    }

    let mut dirs = vec![-Vec3::z()];
    let mut starts = Vec::with_capacity(rings);
    for (k, (&theta, &n)) in thetas.iter().zip(&counts).enumerate() {
        starts.push(dirs.len());
        let offset = if k % 2 == 0 { 0.0 } else { 0.5 };
        for j in 0..n {
            let phi = 2.0 * PI * (j as f64 + offset) / n as f64;
            dirs.push(Vec3::new(
                theta.sin() * phi.cos(),
                theta.sin() * phi.sin(),
                -theta.cos(),
            ));
        }
    }

    let mut triangles = Vec::new();
    let n0 = counts[0];
    for j in 0..n0 {
        triangles.push([0, starts[0] + j, starts[0] + (j + 1) % n0]);
    }
    for k in 1..rings {
        let (sa, na) = (starts[k - 1], counts[k - 1]);
        let (sb, nb) = (starts[k], counts[k]);
        let off_a = if (k - 1) % 2 == 0 { 0.0 } else { 0.5 };
        let off_b = if k % 2 == 0 { 0.0 } else { 0.5 };
        let (mut i, mut j) = (0, 0);
        while i < na || j < nb {
            let next_a = (i as f64 + 1.0 + off_a) / na as f64;
            let next_b = (j as f64 + 1.0 + off_b) / nb as f64;
            let a0 = sa + i % na;
            let b0 = sb + j % nb;
            if j >= nb || (i < na && next_a <= next_b) {
                triangles.push([a0, sa + (i + 1) % na, b0]);
                i += 1;
            } else {
                triangles.push([a0, sb + (j + 1) % nb, b0]);
                j += 1;
            }
        }
    }
    (dirs, triangles)
}

/// Sum of a few random Gaussian bumps over the direction sphere, as a flat
/// `3V` vector.
fn smooth_field(dirs: &[Vec3], rng: &mut ChaCha8Rng, region: Option<&dyn Fn(&Vec3) -> bool>) -> Vec<f64> {
    const BUMPS: usize = 4;
    const WIDTH: f64 = 0.35;
    let centers: Vec<(Vec3, Vec3)> = (0..BUMPS)
        .map(|_| {
            let center = loop {
                let c = Vec3::new(
                    rng.random_range(-0.9..0.9),
                    rng.random_range(-0.9..0.9),
                    -rng.random_range(0.2..1.0),
                )
                .normalize();
                if region.is_none_or(|f| f(&c)) {
                    break c;
                }
            };
            let amp = Vec3::new(
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            );
            (center, amp)
        })
        .collect();
    let mut out = Vec::with_capacity(3 * dirs.len());
    for d in dirs {
        let mut f = Vec3::zeros();
        for (c, a) in &centers {
            f += a * (-(d - c).norm_squared() / (2.0 * WIDTH * WIDTH)).exp();
        }
        out.extend_from_slice(&[f.x, f.y, f.z]);
    }
    out
}

/// Modified Gram-Schmidt; columns that become numerically dependent are only
/// normalized.
fn orthonormalize(cols: &mut [&mut Vec<f64>]) {
    for k in 0..cols.len() {
        let orig = cols[k].iter().map(|x| x * x).sum::<f64>().sqrt();
        let (done, rest) = cols.split_at_mut(k);
        let col = &mut *rest[0];
        let backup = col.clone();
        for prev in done.iter() {
            let dot: f64 = col.iter().zip(prev.iter()).map(|(a, b)| a * b).sum();
            col.iter_mut().zip(prev.iter()).for_each(|(a, b)| *a -= dot * b);
        }
        let mut n = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 * orig.max(1e-300) {
            col.copy_from_slice(&backup);
            n = orig;
        }
        col.iter_mut().for_each(|x| *x /= n);
    }
}

fn template_direction(x: f64, y: f64) -> Vec3 {
    let mut p = nalgebra::Vector2::new(0.85 * x, 0.85 * y);
    if p.norm() > 0.95 {
        p *= 0.95 / p.norm();
    }
    Vec3::new(p.x, p.y, -(1.0 - p.norm_squared()).sqrt())
}

fn nearest_direction(dirs: &[Vec3], target: &Vec3) -> usize {
    dirs.iter()
        .enumerate()
        .max_by(|a, b| a.1.dot(target).total_cmp(&b.1.dot(target)))
        .map(|(i, _)| i)
        .unwrap()
}

fn in_mouth(d: &Vec3) -> bool {
    let (x, y) = (d.x / 0.85, d.y / 0.85);
    (x / 0.42).powi(2) + ((y + 0.45) / 0.2).powi(2) <= 1.0
}

fn in_eye(d: &Vec3) -> bool {
    let (x, y) = (d.x / 0.85, d.y / 0.85);
    [-0.4, 0.4]
        .iter()
        .any(|cx| ((x - cx) / 0.2).powi(2) + ((y - 0.25) / 0.1).powi(2) <= 1.0)
}

fn in_brow(d: &Vec3) -> bool {
    let (x, y) = (d.x / 0.85, d.y / 0.85);
    [-0.4, 0.4]
        .iter()
        .any(|cx| ((x - cx) / 0.25).powi(2) + ((y - 0.45) / 0.06).powi(2) <= 1.0)
}

/// Normalized 2D positions of the 68-point layout, `y` up.
fn landmark_template() -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(LANDMARK_COUNT);
    for i in 0..17 {
        let t = PI + PI * i as f64 / 16.0;
        pts.push((0.9 * t.cos(), 0.15 + t.sin()));
    }
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            let s = i as f64 / 4.0;
            let x = if side < 0.0 { -0.75 + 0.6 * s } else { 0.15 + 0.6 * s };
            pts.push((x, 0.45 + 0.05 * (PI * s).sin()));
        }
    }
    for i in 0..4 {
        pts.push((0.0, 0.3 - 0.35 * i as f64 / 3.0));
    }
    for i in 0..5 {
        pts.push((-0.18 + 0.09 * i as f64, -0.15));
    }
    for cx in [-0.4, 0.4] {
        for i in 0..6 {
            let t = PI - 2.0 * PI * i as f64 / 6.0;
            pts.push((cx + 0.15 * t.cos(), 0.25 + 0.06 * t.sin()));
        }
    }
    for i in 0..12 {
        let t = PI - 2.0 * PI * i as f64 / 12.0;
        pts.push((0.35 * t.cos(), -0.45 + 0.15 * t.sin()));
    }
    for i in 0..8 {
        let t = PI - 2.0 * PI * i as f64 / 8.0;
        pts.push((0.22 * t.cos(), -0.45 + 0.06 * t.sin()));
    }
    debug_assert_eq!(pts.len(), LANDMARK_COUNT);
    pts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_in_seed() {
        let a = synthesize_toy_model(100, 8, 6, 8, 42).unwrap();
        let b = synthesize_toy_model(100, 8, 6, 8, 42).unwrap();
        assert_eq!(a, b);
        let c = synthesize_toy_model(100, 8, 6, 8, 43).unwrap();
        assert_ne!(a.mean_shape, c.mean_shape);
    }

    #[test]
    fn exact_vertex_counts_and_invariants() {
        for v in [4, 5, 17, 100, 257, 1000] {
            let m = synthesize_toy_model(v, 3, 2, 4, 7).unwrap();
            assert_eq!(m.vertex_count(), v);
            m.validate().unwrap();
            assert_eq!(m.landmarks.len(), LANDMARK_COUNT);
            assert!(m.skin_region.len() >= 2);
        }
    }

    #[test]
    fn every_vertex_is_used_and_faces_point_outward() {
        let m = synthesize_toy_model(100, 8, 6, 8, 1).unwrap();
        let mut used = [false; 100];
        for t in &m.triangles {
            for &i in t {
                used[i] = true;
            }
        }
        assert!(used.iter().all(|&u| u));
        let n = super::super::vertex_normals(&m.evaluate_shape(&[0.0; 8], &[0.0; 6]).unwrap(), &m.triangles);
        assert!(n.normals[m.nose_tip].z < -0.9);
    }

    #[test]
    fn bounding_box_diagonal_regression() {
        let m = synthesize_toy_model(100, 8, 6, 8, 0).unwrap();
        let pts = super::super::to_points(&m.mean_shape);
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &pts {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let diag = (hi - lo).norm();
        assert!((150.0..=300.0).contains(&diag), "diag {diag}");
        // Frozen from the first run of the generator.
        assert!((diag - 250.944588).abs() < 1e-5, "diag {diag}");
    }

    #[test]
    fn landmark_weights_emphasize_nose_and_inner_mouth() {
        let m = synthesize_toy_model(100, 8, 6, 8, 0).unwrap();
        for (n, lm) in m.landmarks.iter().enumerate() {
            let want = if (27..=35).contains(&n) || (60..=67).contains(&n) {
                20.0
            } else {
                1.0
            };
            assert_eq!(lm.weight, want, "landmark {n}");
        }
    }

    #[test]
    fn rejects_tiny_models() {
        assert!(synthesize_toy_model(3, 1, 1, 1, 0).is_err());
        assert!(synthesize_toy_model(10, 0, 1, 1, 0).is_err());
    }
}
