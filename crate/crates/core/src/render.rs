//! Full image-formation pipeline (shape → normals → shading → pose →
//! projection → raster) and its reverse-mode adjoint under a frozen
//! pixel-to-triangle assignment.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Rgb;
use crate::model::{
    flatten_points, vertex_normals, vertex_normals_backward, CoefficientVector, MorphableModel, Texture, Vec3,
    VertexNormals,
};
use crate::raster::{edge_function, rasterize, RenderBuffer};
use crate::scene::{irradiance, sh_eval, sh_jacobian, Camera, Projected};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub background: Rgb,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { background: [0.0; 3] }
    }
}

/// Every intermediate of one forward pass, kept for the adjoint.
#[derive(Debug, Clone)]
pub struct Forward {
    pub shape: Vec<Vec3>,
    pub normals: VertexNormals,
    pub rotation: Matrix3<f64>,
    pub normals_cam: Vec<Vec3>,
    pub texture: Texture,
    pub irradiance: Vec<f64>,
    pub shaded_raw: Vec<Vec3>,
    pub colors: Vec<Vec3>,
    pub camera_space: Vec<Vec3>,
    pub projected: Vec<Projected>,
    pub buffer: RenderBuffer,
}

pub fn forward(
    model: &MorphableModel,
    x: &CoefficientVector,
    camera: &Camera,
    options: &RenderOptions,
) -> Result<Forward> {
    x.dims_match(model.dims())?;
    let shape = model.evaluate_shape(&x.alpha, &x.beta)?;
    let normals = vertex_normals(&shape, &model.triangles);
    let rotation = x.pose.rotation();
    let translation = x.pose.translation_vec();
    let normals_cam: Vec<Vec3> = normals.normals.iter().map(|n| rotation * n).collect();
    let texture = model.evaluate_texture(&x.delta)?;
    let irr: Vec<f64> = normals_cam.iter().map(|n| irradiance(n, &x.gamma)).collect();
    let shaded_raw: Vec<Vec3> = texture.albedo.iter().zip(&irr).map(|(t, e)| t * *e).collect();
    let colors: Vec<Vec3> = shaded_raw.iter().map(|c| c.map(|v| v.clamp(0.0, 1.0))).collect();
    let camera_space: Vec<Vec3> = shape.iter().map(|p| rotation * p + translation).collect();
    let projected: Vec<Projected> = camera_space.iter().map(|p| camera.project_point(p)).collect();
    let buffer = rasterize(
        &projected,
        &model.triangles,
        &colors,
        camera.width,
        camera.height,
        options.background,
    );
    Ok(Forward {
        shape,
        normals,
        rotation,
        normals_cam,
        texture,
        irradiance: irr,
        shaded_raw,
        colors,
        camera_space,
        projected,
        buffer,
    })
}

/// Renders the reconstructed image `I′(x)` with its coverage mask.
pub fn render_image(
    model: &MorphableModel,
    x: &CoefficientVector,
    camera: &Camera,
    options: &RenderOptions,
) -> Result<RenderBuffer> {
    Ok(forward(model, x, camera, options)?.buffer)
}

/// Projected model landmarks with weights and visibility.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmarks2D {
    pub points: Vec<[f64; 2]>,
    pub weights: Vec<f64>,
    pub visible: Vec<bool>,
}

/// Depth slack (mm) for calling a landmark visible in the depth buffer.
pub const LANDMARK_VISIBILITY_SLACK: f64 = 2.0;

impl Forward {
    pub fn landmarks(&self, model: &MorphableModel) -> Landmarks2D {
        let b = &self.buffer;
        let mut points = Vec::with_capacity(model.landmarks.len());
        let mut visible = Vec::with_capacity(model.landmarks.len());
        for lm in &model.landmarks {
            let p = self.projected[lm.vertex];
            points.push([p.u, p.v]);
            let vis =
                p.in_front && p.u >= 0.0 && p.v >= 0.0 && (p.u as usize) < b.width && (p.v as usize) < b.height && {
                    let d = b.depth[p.v as usize * b.width + p.u as usize];
                    d.is_finite() && (p.depth - d).abs() <= LANDMARK_VISIBILITY_SLACK
                };
            visible.push(vis);
        }
        Landmarks2D {
            points,
            weights: model.landmark_weights(),
            visible,
        }
    }
}

pub fn project_landmarks(model: &MorphableModel, x: &CoefficientVector, camera: &Camera) -> Result<Landmarks2D> {
    Ok(forward(model, x, camera, &RenderOptions::default())?.landmarks(model))
}

/// Upstream gradients entering the pipeline.
#[derive(Debug, Default, Clone, Copy)]
pub struct UpstreamGrads<'a> {
    /// `∂L/∂I′` per pixel; only covered pixels contribute.
    pub pixels: Option<&'a [Rgb]>,
    /// `∂L/∂q′_n` per model landmark.
    pub landmarks: Option<&'a [[f64; 2]]>,
    /// Direct gradient on the unclamped per-vertex texture.
    pub texture_raw: Option<&'a [Vec3]>,
}

/// Reverse pass: returns `∂L/∂x` as a flat coefficient-ordered vector.
pub fn backward(
    model: &MorphableModel,
    x: &CoefficientVector,
    camera: &Camera,
    fwd: &Forward,
    upstream: UpstreamGrads<'_>,
) -> Vec<f64> {
    let v = fwd.shape.len();
    let mut d_color = vec![Vec3::zeros(); v];
    // ∂L/∂(u, v, depth) per vertex.
    let mut d_screen = vec![[0.0f64; 3]; v];

    if let Some(pix) = upstream.pixels {
        let b = &fwd.buffer;
        for (idx, frag) in b.fragment.iter().enumerate() {
            let Some(frag) = frag else { continue };
            let g = Vec3::from(pix[idx]);
            if g == Vec3::zeros() {
                continue;
            }
            let tri = model.triangles[frag.triangle];
            let lambda = frag.bary;
            let mut d_lambda = [0.0; 3];
            for k in 0..3 {
                d_color[tri[k]] += g * lambda[k];
                d_lambda[k] = g.dot(&fwd.colors[tri[k]]);
            }
            let pv = tri.map(|i| fwd.projected[i]);
            let pts = pv.map(|p| (p.u, p.v));
            let z = pv.map(|p| p.depth);
            let px = ((idx % b.width) as f64 + 0.5, (idx / b.width) as f64 + 0.5);
            let area = edge_function(pts[0], pts[1], pts[2]);
            let w = [
                edge_function(pts[1], pts[2], px),
                edge_function(pts[2], pts[0], px),
                edge_function(pts[0], pts[1], px),
            ];
            let s = w.map(|wk| wk / area);
            // λ_k = q_k / Σq with q_k = s_k / z_k.
            let q = [s[0] / z[0], s[1] / z[1], s[2] / z[2]];
            let qsum = q[0] + q[1] + q[2];
            let mean: f64 = (0..3).map(|k| lambda[k] * d_lambda[k]).sum();
            let mut d_s = [0.0; 3];
            for k in 0..3 {
                let dq = (d_lambda[k] - mean) / qsum;
                d_s[k] = dq / z[k];
                d_screen[tri[k]][2] -= dq * s[k] / (z[k] * z[k]);
            }
            // s_k = w_k / Σw.
            let s_mean: f64 = (0..3).map(|k| s[k] * d_s[k]).sum();
            for k in 0..3 {
                let dw = (d_s[k] - s_mean) / area;
                let (ia, ib) = ((k + 1) % 3, (k + 2) % 3);
                let (a, bb) = (pts[ia], pts[ib]);
                d_screen[tri[ia]][0] += dw * (bb.1 - px.1);
                d_screen[tri[ia]][1] += dw * (px.0 - bb.0);
                d_screen[tri[ib]][0] += dw * (px.1 - a.1);
                d_screen[tri[ib]][1] -= dw * (px.0 - a.0);
            }
        }
    }

    if let Some(lg) = upstream.landmarks {
        for (lm, g) in model.landmarks.iter().zip(lg) {
            d_screen[lm.vertex][0] += g[0];
            d_screen[lm.vertex][1] += g[1];
        }
    }

    let r = fwd.rotation;
    let rt = r.transpose();
    let mut d_shape = vec![Vec3::zeros(); v];
    let mut d_rot = Matrix3::zeros();
    let mut d_trans = Vec3::zeros();
    for i in 0..v {
        let [du, dv, dz] = d_screen[i];
        if du == 0.0 && dv == 0.0 && dz == 0.0 {
            continue;
        }
        let dx = camera.project_backward(&fwd.camera_space[i], du, dv, dz);
        d_shape[i] += rt * dx;
        d_rot += dx * fwd.shape[i].transpose();
        d_trans += dx;
    }

    // Shading.
    let mut d_albedo = vec![Vec3::zeros(); v];
    let mut d_normal_cam = vec![Vec3::zeros(); v];
    let mut d_gamma = [0.0; 9];
    for i in 0..v {
        if d_color[i] == Vec3::zeros() {
            continue;
        }
        let raw = fwd.shaded_raw[i];
        let d_raw = Vec3::from_fn(|c, _| {
            if (0.0..=1.0).contains(&raw[c]) {
                d_color[i][c]
            } else {
                0.0
            }
        });
        let t = fwd.texture.albedo[i];
        d_albedo[i] = d_raw * fwd.irradiance[i];
        let d_e = d_raw.dot(&t);
        let n = fwd.normals_cam[i];
        let basis = sh_eval(&n);
        let jac = sh_jacobian(&n);
        for b in 0..9 {
            d_gamma[b] += d_e * basis[b];
            d_normal_cam[i] += jac[b] * (d_e * x.gamma[b]);
        }
    }
    let mut d_normal = vec![Vec3::zeros(); v];
    for i in 0..v {
        if d_normal_cam[i] == Vec3::zeros() {
            continue;
        }
        d_normal[i] = rt * d_normal_cam[i];
        d_rot += d_normal_cam[i] * fwd.normals.normals[i].transpose();
    }
    let from_normals = vertex_normals_backward(&fwd.shape, &model.triangles, &fwd.normals, &d_normal);
    for (d, g) in d_shape.iter_mut().zip(&from_normals) {
        *d += g;
    }

    // Texture clamp (identity inside [0, 1], zero outside).
    let mut d_tex_raw: Vec<Vec3> = d_albedo
        .iter()
        .zip(&fwd.texture.raw)
        .map(|(g, raw)| Vec3::from_fn(|c, _| if (0.0..=1.0).contains(&raw[c]) { g[c] } else { 0.0 }))
        .collect();
    if let Some(direct) = upstream.texture_raw {
        for (d, g) in d_tex_raw.iter_mut().zip(direct) {
            *d += g;
        }
    }

    let d_shape_flat = flatten_points(&d_shape);
    let mut grad = Vec::with_capacity(x.len());
    grad.extend(model.basis_id.transpose_apply(&d_shape_flat));
    grad.extend(model.basis_exp.transpose_apply(&d_shape_flat));
    grad.extend(model.basis_tex.transpose_apply(&flatten_points(&d_tex_raw)));
    grad.extend_from_slice(&d_gamma);
    grad.extend_from_slice(&x.pose.angle_gradient(&d_rot));
    grad.extend_from_slice(&[d_trans.x, d_trans.y, d_trans.z]);
    grad
}
