//! The hybrid fitting loss: robust skin-weighted photometric term, weighted
//! landmark term, perceptual cosine term, coefficient prior and texture
//! flattening.

use log::warn;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::image::{Image, Rgb};
use crate::model::{CoefficientVector, MorphableModel, Vec3};
use crate::raster::RenderBuffer;
use crate::render::{backward, forward, RenderOptions, UpstreamGrads};
use crate::scene::Camera;

/// Outer weights of the five loss terms plus the inner prior weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub photo: f64,
    pub lan: f64,
    pub per: f64,
    pub coef: f64,
    pub tex: f64,
    pub reg_alpha: f64,
    pub reg_beta: f64,
    pub reg_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            photo: 1.9,
            lan: 1.6e-3,
            per: 0.2,
            coef: 3e-4,
            tex: 5.0,
            reg_alpha: 1.0,
            reg_beta: 0.8,
            reg_delta: 1.7e-3,
        }
    }
}

impl LossWeights {
    /// Weights used when training confidences over image sets: landmark
    /// 1.6e-3, photometric 1.9 and perceptual 0.1.
    pub fn multi_image() -> Self {
        LossWeights {
            per: 0.1,
            ..LossWeights::default()
        }
    }

    pub fn zero() -> Self {
        LossWeights {
            photo: 0.0,
            lan: 0.0,
            per: 0.0,
            coef: 0.0,
            tex: 0.0,
            ..LossWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.photo,
            self.lan,
            self.per,
            self.coef,
            self.tex,
            self.reg_alpha,
            self.reg_beta,
            self.reg_delta,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput(format!("loss weights must be >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Per-pixel residual norm used by the photometric term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhotoNorm {
    /// `‖I − I′‖₂`.
    #[default]
    L2,
    /// `‖I − I′‖₂²`.
    SquaredL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub photo: f64,
    pub lan: f64,
    pub per: f64,
    pub coef: f64,
    pub tex: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(photo: f64, lan: f64, per: f64, coef: f64, tex: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            photo,
            lan,
            per,
            coef,
            tex,
            total: w.photo * photo + w.lan * lan + w.per * per + w.coef * coef + w.tex * tex,
        }
    }
}

/// Value and per-pixel gradient `∂L/∂I′` of the photometric term.
pub fn photometric_loss_grad(
    image: &Image,
    render: &RenderBuffer,
    attention: &[f64],
    norm: PhotoNorm,
) -> Result<(f64, Vec<Rgb>)> {
    check_len("render pixels", image.len(), render.color.len())?;
    check_len("attention", image.len(), attention.len())?;
    let mut grad = vec![[0.0; 3]; image.len()];
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..image.len() {
        if render.mask[i] {
            let d = Vec3::from(image.pixels[i]) - Vec3::from(render.color[i]);
            let r = match norm {
                PhotoNorm::L2 => d.norm(),
                PhotoNorm::SquaredL2 => d.norm_squared(),
            };
            num += attention[i] * r;
            den += attention[i];
        }
    }
    if den <= 0.0 {
        warn!("photometric loss over an empty (or zero-attention) face region");
        return Ok((0.0, grad));
    }
    for i in 0..image.len() {
        if !render.mask[i] || attention[i] == 0.0 {
            continue;
        }
        let d = Vec3::from(render.color[i]) - Vec3::from(image.pixels[i]);
        // Zero subgradient at zero residual.
        let g = match norm {
            PhotoNorm::L2 => {
                let n = d.norm();
                if n > 0.0 {
                    d / n
                } else {
                    Vec3::zeros()
                }
            }
            PhotoNorm::SquaredL2 => d * 2.0,
        } * (attention[i] / den);
        grad[i] = [g.x, g.y, g.z];
    }
    Ok((num / den, grad))
}

/// `Σ_{i∈M} A_i·‖I_i − I′_i‖ / Σ_{i∈M} A_i`.
pub fn photometric_loss(image: &Image, render: &RenderBuffer, attention: &[f64], norm: PhotoNorm) -> Result<f64> {
    photometric_loss_grad(image, render, attention, norm).map(|(l, _)| l)
}

/// `(1/N)·Σ ω_n‖q_n − q′_n‖²` and `∂L/∂q′`.
pub fn landmark_loss_grad(
    detected: &[[f64; 2]],
    projected: &[[f64; 2]],
    weights: &[f64],
) -> Result<(f64, Vec<[f64; 2]>)> {
    check_len("projected landmarks", detected.len(), projected.len())?;
    check_len("landmark weights", detected.len(), weights.len())?;
    let n = detected.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for ((q, p), w) in detected.iter().zip(projected).zip(weights) {
        let (du, dv) = (p[0] - q[0], p[1] - q[1]);
        loss += w * (du * du + dv * dv);
        grad.push([2.0 * w * du * inv, 2.0 * w * dv * inv]);
    }
    Ok((loss * inv, grad))
}

pub fn landmark_loss(detected: &[[f64; 2]], projected: &[[f64; 2]], weights: &[f64]) -> Result<f64> {
    landmark_loss_grad(detected, projected, weights).map(|(l, _)| l)
}

/// A differentiable image feature map used by the perceptual term.
pub trait FeatureEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, image: &Image) -> Vec<f64>;
    /// Pulls `∂L/∂f` back to `∂L/∂pixel` for the given image.
    fn backprop(&self, image: &Image, grad_features: &[f64]) -> Vec<Rgb>;
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Fixed random orthogonal projection of a grayscale, box-downsampled image.
#[derive(Debug, Clone)]
pub struct ProjectionEmbedder {
    grid: usize,
    /// `dim × grid²`, orthonormal rows.
    weights: DMatrix<f64>,
}

impl ProjectionEmbedder {
    pub const DEFAULT_GRID: usize = 32;
    pub const DEFAULT_DIM: usize = 128;
    pub const DEFAULT_SEED: u64 = 0xfea7;

    pub fn new(dim: usize, grid: usize, seed: u64) -> Result<Self> {
        let cells = grid * grid;
        if dim == 0 || grid == 0 || dim > cells {
            return Err(Error::InvalidInput(format!(
                "embedder dim {dim} must be in 1..={cells}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(cells, dim, |_, _| StandardNormal.sample(&mut rng));
        let q = g.qr().q();
        Ok(ProjectionEmbedder {
            grid,
            weights: q.transpose(),
        })
    }

    fn cell_of(&self, image: &Image, idx: usize) -> usize {
        let (x, y) = (idx % image.width, idx / image.width);
        let cx = x * self.grid / image.width;
        let cy = y * self.grid / image.height;
        cy * self.grid + cx
    }

    fn cell_counts(&self, image: &Image) -> Vec<usize> {
        let mut counts = vec![0usize; self.grid * self.grid];
        for i in 0..image.len() {
            counts[self.cell_of(image, i)] += 1;
        }
        counts
    }

    pub fn downsample(&self, image: &Image) -> Vec<f64> {
        let counts = self.cell_counts(image);
        let mut cells = vec![0.0; self.grid * self.grid];
        for (i, p) in image.pixels.iter().enumerate() {
            cells[self.cell_of(image, i)] += LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2];
        }
        for (c, n) in cells.iter_mut().zip(&counts) {
            if *n > 0 {
                *c /= *n as f64;
            }
        }
        cells
    }
}

impl Default for ProjectionEmbedder {
    fn default() -> Self {
        ProjectionEmbedder::new(Self::DEFAULT_DIM, Self::DEFAULT_GRID, Self::DEFAULT_SEED)
            .expect("default embedder parameters are valid")
    }
}

impl FeatureEmbedder for ProjectionEmbedder {
    fn dim(&self) -> usize {
        self.weights.nrows()
    }

    fn embed(&self, image: &Image) -> Vec<f64> {
        let cells = nalgebra::DVector::from_vec(self.downsample(image));
        (&self.weights * cells).data.into()
    }

    fn backprop(&self, image: &Image, grad_features: &[f64]) -> Vec<Rgb> {
        let g = nalgebra::DVector::from_column_slice(grad_features);
        let grad_cells = self.weights.tr_mul(&g);
        let counts = self.cell_counts(image);
        (0..image.len())
            .map(|i| {
                let c = self.cell_of(image, i);
                let s = grad_cells[c] / counts[c] as f64;
                LUMA.map(|l| l * s)
            })
            .collect()
    }
}

/// Cosine distance `1 − ⟨a, b⟩ / (‖a‖‖b‖)` and its gradient w.r.t. `b`.
pub fn cosine_distance_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("feature", a.len(), b.len())?;
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::ZeroNormFeature);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| -(x / (na * nb) - cos * y / (nb * nb)))
        .collect();
    Ok((1.0 - cos, grad))
}

pub fn perceptual_loss(embedder: &dyn FeatureEmbedder, image: &Image, rendered: &Image) -> Result<f64> {
    cosine_distance_grad(&embedder.embed(image), &embedder.embed(rendered)).map(|(l, _)| l)
}

/// `ω_α‖α‖² + ω_β‖β‖² + ω_δ‖δ‖²`.
pub fn coefficient_regularization(alpha: &[f64], beta: &[f64], delta: &[f64], w: &LossWeights) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    w.reg_alpha * sq(alpha) + w.reg_beta * sq(beta) + w.reg_delta * sq(delta)
}

/// Sum over RGB of the population variance of the unclamped texture on the
/// skin region, with its gradient on per-vertex raw texture.
pub fn texture_flatten_grad(model: &MorphableModel, raw_texture: &[Vec3]) -> (f64, Vec<Vec3>) {
    let region = &model.skin_region;
    let mut grad = vec![Vec3::zeros(); raw_texture.len()];
    if region.len() < 2 {
        warn!("texture flattening region has fewer than 2 vertices");
        return (0.0, grad);
    }
    let n = region.len() as f64;
    let mean = region.iter().map(|&i| raw_texture[i]).sum::<Vec3>() / n;
    let mut var = 0.0;
    for &i in region {
        let d = raw_texture[i] - mean;
        var += d.norm_squared();
        grad[i] += d * (2.0 / n);
    }
    (var / n, grad)
}

pub fn texture_flatten_loss(model: &MorphableModel, delta: &[f64]) -> Result<f64> {
    let t = model.evaluate_texture(delta)?;
    Ok(texture_flatten_grad(model, &t.raw).0)
}

/// Everything the loss needs from one observed image.
#[derive(Debug, Clone)]
pub struct FitTarget {
    pub image: Image,
    pub landmarks: Vec<[f64; 2]>,
    /// Skin attention `A`, fixed during fitting.
    pub attention: Vec<f64>,
    /// `f(I)`, cached.
    pub features: Vec<f64>,
}

impl FitTarget {
    pub fn new(
        image: Image,
        landmarks: Vec<[f64; 2]>,
        attention: Vec<f64>,
        embedder: &dyn FeatureEmbedder,
    ) -> Result<Self> {
        check_len("attention", image.len(), attention.len())?;
        let features = embedder.embed(&image);
        Ok(FitTarget {
            image,
            landmarks,
            attention,
            features,
        })
    }
}

/// Shared, read-only state for loss evaluation.
#[derive(Clone, Copy)]
pub struct LossContext<'a> {
    pub model: &'a MorphableModel,
    pub camera: &'a Camera,
    pub embedder: &'a dyn FeatureEmbedder,
    pub weights: LossWeights,
    pub render: RenderOptions,
    pub photo_norm: PhotoNorm,
}

impl<'a> LossContext<'a> {
    pub fn new(model: &'a MorphableModel, camera: &'a Camera, embedder: &'a dyn FeatureEmbedder) -> Self {
        LossContext {
            model,
            camera,
            embedder,
            weights: LossWeights::default(),
            render: RenderOptions::default(),
            photo_norm: PhotoNorm::default(),
        }
    }

    pub fn with_weights(mut self, weights: LossWeights) -> Self {
        self.weights = weights;
        self
    }
}

/// Loss terms and, optionally, the exact gradient w.r.t. the flat `x`.
pub fn evaluate(
    ctx: &LossContext<'_>,
    target: &FitTarget,
    x: &CoefficientVector,
    with_gradient: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    let model = ctx.model;
    let w = &ctx.weights;
    check_len("target landmarks", model.landmarks.len(), target.landmarks.len())?;
    let fwd = forward(model, x, ctx.camera, &ctx.render)?;

    let (photo, photo_grad) = photometric_loss_grad(&target.image, &fwd.buffer, &target.attention, ctx.photo_norm)?;

    let lms = fwd.landmarks(model);
    let (lan, lan_grad) = landmark_loss_grad(&target.landmarks, &lms.points, &lms.weights)?;

    let rendered = fwd.buffer.image();
    let rendered_features = ctx.embedder.embed(&rendered);
    let (per, per_feature_grad) = cosine_distance_grad(&target.features, &rendered_features)?;

    let coef = coefficient_regularization(&x.alpha, &x.beta, &x.delta, w);
    let (tex, tex_grad) = texture_flatten_grad(model, &fwd.texture.raw);
    let losses = LossBreakdown::new(photo, lan, per, coef, tex, w);
    if !with_gradient {
        return Ok((losses, None));
    }

    let mut pixel_grad = vec![[0.0; 3]; rendered.len()];
    if w.photo != 0.0 {
        for (g, p) in pixel_grad.iter_mut().zip(&photo_grad) {
            for c in 0..3 {
                g[c] += w.photo * p[c];
            }
        }
    }
    if w.per != 0.0 {
        let scaled: Vec<f64> = per_feature_grad.iter().map(|g| g * w.per).collect();
        let back = ctx.embedder.backprop(&rendered, &scaled);
        for (g, p) in pixel_grad.iter_mut().zip(&back) {
            for c in 0..3 {
                g[c] += p[c];
            }
        }
    }
    let lan_scaled: Vec<[f64; 2]> = lan_grad.iter().map(|g| [g[0] * w.lan, g[1] * w.lan]).collect();
    let tex_scaled: Vec<Vec3> = tex_grad.iter().map(|g| g * w.tex).collect();
    let mut grad = backward(
        model,
        x,
        ctx.camera,
        &fwd,
        UpstreamGrads {
            pixels: (w.photo != 0.0 || w.per != 0.0).then_some(&pixel_grad[..]),
            landmarks: (w.lan != 0.0).then_some(&lan_scaled[..]),
            texture_raw: (w.tex != 0.0).then_some(&tex_scaled[..]),
        },
    );
    // Coefficient prior.
    let dims = model.dims();
    let [(_, ra), (_, rb), (_, rd), _, _] = CoefficientVector::block_ranges(dims);
    for (g, a) in grad[ra].iter_mut().zip(&x.alpha) {
        *g += w.coef * 2.0 * w.reg_alpha * a;
    }
    for (g, b) in grad[rb].iter_mut().zip(&x.beta) {
        *g += w.coef * 2.0 * w.reg_beta * b;
    }
    for (g, d) in grad[rd].iter_mut().zip(&x.delta) {
        *g += w.coef * 2.0 * w.reg_delta * d;
    }
    Ok((losses, Some(grad)))
}

/// Renders `I′(x)` and evaluates all five terms.
pub fn hybrid_loss(ctx: &LossContext<'_>, target: &FitTarget, x: &CoefficientVector) -> Result<LossBreakdown> {
    evaluate(ctx, target, x, false).map(|(l, _)| l)
}
