//! Gradient of the hybrid loss, Adam, and the single-image fitting loop.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{evaluate, FeatureEmbedder, FitTarget, LossBreakdown, LossContext, LossWeights, PhotoNorm};
use crate::model::{Block, CoefficientVector, MorphableModel, Vec3};
use crate::render::RenderOptions;
use crate::scene::{Camera, Pose, SH_C0};
use crate::skin::{attention_mask, CompiledSkin};

/// Loss value and exact gradient of the weighted total w.r.t. the flat `x`.
pub fn loss_gradient(
    ctx: &LossContext<'_>,
    target: &FitTarget,
    x: &CoefficientVector,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let (loss, grad) = evaluate(ctx, target, x, true)?;
    let grad = grad.expect("gradient requested");
    for (block, range) in CoefficientVector::block_ranges(ctx.model.dims()) {
        if grad[range].iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(block.name()));
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate multipliers per parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockMultipliers {
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub gamma: f64,
    /// Rotation angles (radians).
    pub pose: f64,
    /// Translation (mm); millimeters need far larger steps than radians.
    pub translation: f64,
}

impl Default for BlockMultipliers {
    fn default() -> Self {
        BlockMultipliers {
            alpha: 1.0,
            beta: 1.0,
            delta: 1.0,
            gamma: 1.0,
            pose: 0.1,
            translation: 10.0,
        }
    }
}

impl BlockMultipliers {
    pub fn get(&self, block: Block) -> f64 {
        match block {
            Block::Identity => self.alpha,
            Block::Expression => self.beta,
            Block::Texture => self.delta,
            Block::Lighting => self.gamma,
            Block::Pose => self.pose,
        }
    }

    /// One multiplier per flat coordinate.
    pub fn expand(&self, model: &MorphableModel) -> Vec<f64> {
        let dims = model.dims();
        let mut out = vec![0.0; dims.coefficient_len()];
        for (block, range) in CoefficientVector::block_ranges(dims) {
            out[range].fill(self.get(block));
        }
        let n = out.len();
        out[n - 3..].fill(self.translation);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam: AdamParams,
    pub multipliers: BlockMultipliers,
    /// Starting point; `None` means mean face, ambient light and a pose
    /// estimated from the landmarks.
    pub init: Option<CoefficientVector>,
    /// With no explicit init, solve shape and pose against the landmarks
    /// before the first Adam step.
    pub landmark_init: bool,
    pub seed: u64,
    /// Fraction of iterations run with the photometric and perceptual
    /// terms switched off.
    pub warmup_fraction: f64,
    /// Fraction of iterations, right after the warmup, in which only
    /// texture and lighting move.
    pub appearance_fraction: f64,
    /// Cosine learning-rate decay over the final joint stage down to this
    /// fraction of the base rate (1 = constant).
    pub final_lr_fraction: f64,
    pub weights: LossWeights,
    pub photo_norm: PhotoNorm,
    pub background: [f64; 3],
    /// Record a coefficient snapshot every this many iterations (0 = never).
    pub snapshot_stride: usize,
    pub divergence_threshold: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 2000,
            learning_rate: 0.01,
            adam: AdamParams::default(),
            multipliers: BlockMultipliers::default(),
            init: None,
            landmark_init: true,
            seed: 0,
            warmup_fraction: 0.25,
            appearance_fraction: 0.25,
            final_lr_fraction: 0.1,
            weights: LossWeights::default(),
            photo_norm: PhotoNorm::L2,
            background: [0.0; 3],
            snapshot_stride: 0,
            divergence_threshold: 1e6,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidInput(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::InvalidInput(format!("invalid Adam parameters {a:?}")));
        }
        let (w, a) = (self.warmup_fraction, self.appearance_fraction);
        if !(0.0..=1.0).contains(&w) || !(0.0..=1.0).contains(&a) || w + a > 1.0 || !(self.final_lr_fraction > 0.0) {
            return Err(Error::InvalidInput(format!(
                "schedule fractions must be in [0, 1] with sum <= 1, got warmup {w}, appearance {a}; final lr fraction must be > 0"
            )));
        }
        self.weights.validate()
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update of `x` in place; `scale[i]` multiplies the
/// learning rate of coordinate `i`.
pub fn adam_step(
    state: &mut AdamState,
    x: &mut [f64],
    grad: &[f64],
    lr: f64,
    params: &AdamParams,
    scale: &[f64],
) -> Result<()> {
    let n = x.len();
    for (what, len) in [
        ("gradient", grad.len()),
        ("Adam state", state.m.len()),
        ("step scale", scale.len()),
    ] {
        crate::error::check_len(what, n, len)?;
    }
    state.t += 1;
    let b1t = 1.0 - params.beta1.powi(state.t as i32);
    let b2t = 1.0 - params.beta2.powi(state.t as i32);
    for i in 0..n {
        let g = grad[i];
        state.m[i] = params.beta1 * state.m[i] + (1.0 - params.beta1) * g;
        state.v[i] = params.beta2 * state.v[i] + (1.0 - params.beta2) * g * g;
        let m_hat = state.m[i] / b1t;
        let v_hat = state.v[i] / b2t;
        x[i] -= lr * scale[i] * m_hat / (v_hat.sqrt() + params.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Terms with the total under the full (post-warmup) weights.
    pub loss: LossBreakdown,
    pub best_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub entries: Vec<TraceEntry>,
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub x: CoefficientVector,
    pub loss: LossBreakdown,
    pub best_iteration: usize,
    pub trace: FitTrace,
}

/// A fit that stopped early, with everything recorded up to that point.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct FitFailure {
    #[source]
    pub error: Error,
    pub trace: FitTrace,
}

impl From<Error> for FitFailure {
    fn from(error: Error) -> Self {
        FitFailure {
            error,
            trace: FitTrace::default(),
        }
    }
}

/// Mean face, ambient lighting and a landmark-estimated pose.
pub fn default_init(model: &MorphableModel, camera: &Camera, landmarks: &[[f64; 2]]) -> Result<CoefficientVector> {
    let mut x = CoefficientVector::zeros(model.dims());
    x.gamma[0] = 1.0 / SH_C0;
    x.pose = estimate_pose(model, camera, landmarks, &x.alpha, &x.beta)?;
    Ok(x)
}

/// Weighted landmark reprojection as a least-squares problem over
/// `[α, β, pose]` (or pose alone), with the coefficient prior as extra
/// residuals so that `‖r‖²` equals the landmark plus prior part of the loss.
struct LandmarkProblem<'a> {
    camera: &'a Camera,
    detected: &'a [[f64; 2]],
    scale: Vec<f64>,
    mean: Vec<Vec3>,
    id_rows: Vec<Vec<Vec3>>,
    exp_rows: Vec<Vec<Vec3>>,
    prior: Option<(f64, f64)>,
}

impl<'a> LandmarkProblem<'a> {
    fn new(
        model: &MorphableModel,
        camera: &'a Camera,
        detected: &'a [[f64; 2]],
        weights: Option<&LossWeights>,
    ) -> Self {
        let n = model.landmarks.len() as f64;
        let rows = |b: &crate::model::Basis, v: usize| -> Vec<Vec3> {
            (0..b.cols())
                .map(|k| {
                    let c = b.column(k);
                    Vec3::new(c[3 * v], c[3 * v + 1], c[3 * v + 2])
                })
                .collect()
        };
        let lan = weights.map_or(1.0, |w| w.lan);
        LandmarkProblem {
            camera,
            detected,
            scale: model.landmarks.iter().map(|l| (lan * l.weight / n).sqrt()).collect(),
            mean: model
                .landmarks
                .iter()
                .map(|l| {
                    let v = l.vertex;
                    Vec3::new(
                        model.mean_shape[3 * v],
                        model.mean_shape[3 * v + 1],
                        model.mean_shape[3 * v + 2],
                    )
                })
                .collect(),
            id_rows: model
                .landmarks
                .iter()
                .map(|l| rows(&model.basis_id, l.vertex))
                .collect(),
            exp_rows: model
                .landmarks
                .iter()
                .map(|l| rows(&model.basis_exp, l.vertex))
                .collect(),
            prior: weights.map(|w| ((w.coef * w.reg_alpha).sqrt(), (w.coef * w.reg_beta).sqrt())),
        }
    }

    fn k_id(&self) -> usize {
        self.id_rows.first().map_or(0, |r| r.len())
    }

    fn k_exp(&self) -> usize {
        self.exp_rows.first().map_or(0, |r| r.len())
    }

    fn residual_len(&self, with_shape: bool) -> usize {
        2 * self.mean.len()
            + if with_shape && self.prior.is_some() {
                self.k_id() + self.k_exp()
            } else {
                0
            }
    }

    /// `params` is `[α, β, pose]` when `shape` is `None`, otherwise just the
    /// pose with `shape = (α, β)` held fixed.
    fn eval(&self, params: &[f64], shape: Option<(&[f64], &[f64])>, r: &mut [f64], jac: Option<&mut DMatrix<f64>>) {
        let (ki, ke) = (self.k_id(), self.k_exp());
        let (alpha, beta, pose) = match shape {
            Some((a, b)) => (a, b, params),
            None => (&params[..ki], &params[ki..ki + ke], &params[ki + ke..]),
        };
        let pose = Pose::from_array(pose.try_into().expect("six pose parameters"));
        let rot = pose.rotation();
        let d_rot = pose.rotation_derivatives();
        let t = pose.translation_vec();
        let f = self.camera.focal;
        let p0 = if shape.is_some() { 0 } else { ki + ke };
        let mut jac = jac;
        if let Some(j) = jac.as_deref_mut() {
            j.fill(0.0);
        }
        for n in 0..self.mean.len() {
            let mut x = self.mean[n];
            for (a, b) in alpha.iter().zip(&self.id_rows[n]) {
                x += b * *a;
            }
            for (a, b) in beta.iter().zip(&self.exp_rows[n]) {
                x += b * *a;
            }
            let xc = rot * x + t;
            let s = self.scale[n];
            let u = f * xc.x / xc.z + self.camera.cx;
            let v = self.camera.cy - f * xc.y / xc.z;
            r[2 * n] = s * (u - self.detected[n][0]);
            r[2 * n + 1] = s * (v - self.detected[n][1]);
            let Some(j) = jac.as_deref_mut() else { continue };
            let du = Vec3::new(f / xc.z, 0.0, -f * xc.x / (xc.z * xc.z)) * s;
            let dv = Vec3::new(0.0, -f / xc.z, f * xc.y / (xc.z * xc.z)) * s;
            let mut put = |col: usize, d: Vec3| {
                j[(2 * n, col)] = du.dot(&d);
                j[(2 * n + 1, col)] = dv.dot(&d);
            };
            if shape.is_none() {
                for (k, b) in self.id_rows[n].iter().enumerate() {
                    put(k, rot * b);
                }
                for (k, b) in self.exp_rows[n].iter().enumerate() {
                    put(ki + k, rot * b);
                }
            }
            for (k, dr) in d_rot.iter().enumerate() {
                put(p0 + k, dr * x);
            }
            for k in 0..3 {
                put(p0 + 3 + k, Vec3::ith(k, 1.0));
            }
        }
        if shape.is_none() {
            if let Some((sa, sb)) = self.prior {
                let base = 2 * self.mean.len();
                for k in 0..ki + ke {
                    let w = if k < ki { sa } else { sb };
                    r[base + k] = w * params[k];
                    if let Some(j) = jac.as_deref_mut() {
                        j[(base + k, k)] = w;
                    }
                }
            }
        }
    }
}

/// Writes residuals and, when asked, the Jacobian at the given parameters.
type ResidualFn<'a> = dyn Fn(&[f64], &mut [f64], Option<&mut DMatrix<f64>>) + 'a;

/// Damped Gauss-Newton on `‖r(p)‖²`; returns the final cost and parameters.
fn levenberg_marquardt(
    mut p: Vec<f64>,
    residuals: usize,
    max_iterations: usize,
    eval: &ResidualFn,
) -> (f64, Vec<f64>) {
    let n = p.len();
    let mut r = vec![0.0; residuals];
    let mut jac = DMatrix::zeros(residuals, n);
    eval(&p, &mut r, Some(&mut jac));
    let mut current: f64 = r.iter().map(|v| v * v).sum();
    let mut mu = 1e-3;
    let mut trial = vec![0.0; residuals];
    for _ in 0..max_iterations {
        let jtj = jac.tr_mul(&jac);
        let jtr = jac.tr_mul(&DVector::from_column_slice(&r));
        let mut accepted = false;
        for _ in 0..12 {
            let mut lhs = jtj.clone();
            for k in 0..n {
                lhs[(k, k)] += mu * jtj[(k, k)].max(1e-9);
            }
            let Some(chol) = lhs.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let cand: Vec<f64> = p.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            eval(&cand, &mut trial, None);
            let c: f64 = trial.iter().map(|v| v * v).sum();
            if c.is_finite() && c < current {
                let rel = (current - c) / current.max(1e-300);
                p = cand;
                current = c;
                eval(&p, &mut r, Some(&mut jac));
                mu = (mu * 0.3).max(1e-12);
                accepted = rel > 1e-12;
                break;
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    (current, p)
}

/// Rigid pose that best explains the 2D landmarks for a given shape: a
/// coarse rotation grid with closed-form depth and offset, refined by
/// Levenberg-Marquardt on the weighted reprojection error.
pub fn estimate_pose(
    model: &MorphableModel,
    camera: &Camera,
    landmarks: &[[f64; 2]],
    alpha: &[f64],
    beta: &[f64],
) -> Result<Pose> {
    crate::error::check_len("landmarks", model.landmarks.len(), landmarks.len())?;
    if landmarks.len() < 3 {
        return Err(Error::InvalidInput("pose estimation needs at least 3 landmarks".into()));
    }
    let shape = model.evaluate_shape(alpha, beta)?;
    let pts: Vec<Vec3> = model.landmarks.iter().map(|l| shape[l.vertex]).collect();
    let n = pts.len() as f64;
    let c2 = landmarks
        .iter()
        .fold([0.0, 0.0], |a, q| [a[0] + q[0] / n, a[1] + q[1] / n]);
    let spread2 = (landmarks
        .iter()
        .map(|q| (q[0] - c2[0]).powi(2) + (q[1] - c2[1]).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    if !(spread2 > 0.0) {
        return Err(Error::Degenerate("landmarks have zero spread".into()));
    }

    let problem = LandmarkProblem::new(model, camera, landmarks, None);
    let m = problem.residual_len(false);
    let eval = |p: &[f64], r: &mut [f64], j: Option<&mut DMatrix<f64>>| problem.eval(p, Some((alpha, beta)), r, j);
    let mut residual = vec![0.0; m];
    let mut candidates = Vec::new();
    for pitch_deg in (-30..=30).step_by(15) {
        for yaw_deg in (-90..=90).step_by(15) {
            let mut pose = Pose::new(
                (pitch_deg as f64).to_radians(),
                (yaw_deg as f64).to_radians(),
                0.0,
                [0.0; 3],
            );
            let r = pose.rotation();
            let rotated: Vec<Vec3> = pts.iter().map(|p| r * p).collect();
            let c3 = rotated.iter().sum::<Vec3>() / n;
            let spread3 = (rotated
                .iter()
                .map(|p| (p.x - c3.x).powi(2) + (p.y - c3.y).powi(2))
                .sum::<f64>()
                / n)
                .sqrt();
            let depth = camera.focal * spread3 / spread2;
            pose.translation = [
                (c2[0] - camera.cx) * depth / camera.focal - c3.x,
                (camera.cy - c2[1]) * depth / camera.focal - c3.y,
                depth - c3.z,
            ];
            eval(&pose.to_array(), &mut residual, None);
            candidates.push((residual.iter().map(|v| v * v).sum::<f64>(), pose));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut best: Option<(f64, Vec<f64>)> = None;
    for (_, start) in candidates.into_iter().take(3) {
        let refined = levenberg_marquardt(start.to_array().to_vec(), m, 100, &eval);
        if best.as_ref().is_none_or(|(c, _)| refined.0 < *c) {
            best = Some(refined);
        }
    }
    let p = best.expect("at least one candidate").1;
    Ok(Pose::from_array(p.try_into().expect("six pose parameters")))
}

/// Jointly solves identity, expression and pose for the landmark and
/// coefficient-prior terms, starting from `x`; texture and lighting are
/// left untouched.
pub fn fit_landmarks(
    model: &MorphableModel,
    camera: &Camera,
    landmarks: &[[f64; 2]],
    weights: &LossWeights,
    x: &CoefficientVector,
) -> Result<CoefficientVector> {
    crate::error::check_len("landmarks", model.landmarks.len(), landmarks.len())?;
    x.dims_match(model.dims())?;
    let problem = LandmarkProblem::new(model, camera, landmarks, Some(weights));
    let mut p = x.alpha.clone();
    p.extend_from_slice(&x.beta);
    p.extend_from_slice(&x.pose.to_array());
    let eval = |p: &[f64], r: &mut [f64], j: Option<&mut DMatrix<f64>>| problem.eval(p, None, r, j);
    let (_, p) = levenberg_marquardt(p, problem.residual_len(true), 100, &eval);
    let (ki, ke) = (x.alpha.len(), x.beta.len());
    let mut out = x.clone();
    out.alpha.copy_from_slice(&p[..ki]);
    out.beta.copy_from_slice(&p[ki..ki + ke]);
    out.pose = Pose::from_array(p[ki + ke..].try_into().expect("six pose parameters"));
    Ok(out)
}

/// Analysis-by-synthesis fit of `x` to one image with Adam; returns the
/// iterate with the lowest full-weight total loss.
#[allow(clippy::too_many_arguments)]
pub fn fit_single_image(
    model: &MorphableModel,
    image: &Image,
    landmarks: &[[f64; 2]],
    camera: &Camera,
    config: &FitConfig,
    embedder: &dyn FeatureEmbedder,
    skin: Option<&CompiledSkin>,
) -> std::result::Result<FitResult, FitFailure> {
    config.validate()?;
    camera.validate()?;
    crate::error::check_len("landmarks", model.landmarks.len(), landmarks.len())?;
    if image.width != camera.width || image.height != camera.height {
        return Err(Error::DimensionMismatch {
            what: "image size vs camera",
            expected: camera.width * camera.height,
            found: image.len(),
        }
        .into());
    }
    let attention = match skin {
        Some(s) => attention_mask(&s.probability_map(image)),
        None => vec![1.0; image.len()],
    };
    let target = FitTarget::new(image.clone(), landmarks.to_vec(), attention, embedder)?;
    let init = match &config.init {
        Some(x) => {
            x.dims_match(model.dims())?;
            x.clone()
        }
        None => {
            let x = default_init(model, camera, landmarks)?;
            if config.landmark_init {
                fit_landmarks(model, camera, landmarks, &config.weights, &x)?
            } else {
                x
            }
        }
    };
    let mut ctx = LossContext::new(model, camera, embedder);
    ctx.render = RenderOptions {
        background: config.background,
    };
    ctx.photo_norm = config.photo_norm;
    let full = config.weights;
    let warm = LossWeights {
        photo: 0.0,
        per: 0.0,
        ..full
    };
    let warmup = (config.iterations as f64 * config.warmup_fraction).round() as usize;
    let appearance_end = warmup + (config.iterations as f64 * config.appearance_fraction).round() as usize;
    let scale = config.multipliers.expand(model);
    let dims = model.dims();
    let mut appearance_scale = scale.clone();
    for (block, range) in CoefficientVector::block_ranges(dims) {
        if matches!(block, Block::Identity | Block::Expression | Block::Pose) {
            appearance_scale[range].fill(0.0);
        }
    }

    let mut trace = FitTrace::default();
    let mut flat = init.flatten();
    let mut state = AdamState::new(flat.len());
    let mut best: Option<(f64, usize, Vec<f64>, LossBreakdown)> = None;
    for it in 0..=config.iterations {
        let x = CoefficientVector::unflatten(&flat, dims).expect("flat length is fixed");
        ctx.weights = if it < warmup { warm } else { full };
        let step = if it < config.iterations {
            loss_gradient(&ctx, &target, &x).map(|(l, g)| (l, Some(g)))
        } else {
            evaluate(&ctx, &target, &x, false)
        };
        let (terms, grad) = match step {
            Ok(v) => v,
            Err(error) => return Err(FitFailure { error, trace }),
        };
        let loss = LossBreakdown::new(terms.photo, terms.lan, terms.per, terms.coef, terms.tex, &full);
        if !loss.total.is_finite() || loss.total > config.divergence_threshold {
            warn!("fit diverged at iteration {it}: total {}", loss.total);
            return Err(FitFailure {
                error: Error::Diverged {
                    iteration: it,
                    loss: loss.total,
                },
                trace,
            });
        }
        if best.as_ref().is_none_or(|b| loss.total < b.0) {
            best = Some((loss.total, it, flat.clone(), loss));
        }
        let best_total = best.as_ref().map(|b| b.0).unwrap_or(loss.total);
        trace.entries.push(TraceEntry {
            iteration: it,
            loss,
            best_total,
        });
        if config.snapshot_stride > 0 && it % config.snapshot_stride == 0 {
            trace.snapshots.push((it, flat.clone()));
        }
        if it % 250 == 0 {
            debug!(
                "iteration {it}: total {:.6} (lan {:.4}, photo {:.5})",
                loss.total, loss.lan, loss.photo
            );
        }
        if it == warmup || it == appearance_end {
            // Stale moments from a different objective or frozen blocks.
            state = AdamState::new(flat.len());
        }
        if let Some(g) = grad {
            let active = if (warmup..appearance_end).contains(&it) {
                &appearance_scale
            } else {
                &scale
            };
            let lr = if it >= appearance_end {
                let span = (config.iterations - appearance_end).max(1) as f64;
                let progress = (it - appearance_end) as f64 / span;
                let f = config.final_lr_fraction;
                config.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
            } else {
                config.learning_rate
            };
            adam_step(&mut state, &mut flat, &g, lr, &config.adam, active).map_err(|error| FitFailure {
                error,
                trace: trace.clone(),
            })?;
        }
    }
    let (_, best_iteration, flat, loss) = best.expect("at least one iteration is evaluated");
    Ok(FitResult {
        x: CoefficientVector::unflatten(&flat, dims).expect("flat length is fixed"),
        loss,
        best_iteration,
        trace,
    })
}
