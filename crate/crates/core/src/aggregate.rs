//! Multi-image identity aggregation: confidence-weighted averaging of the
//! identity coefficients, the confidence predictor and its label-free
//! training through the multi-image rendering loss.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fit::{adam_step, AdamParams, AdamState, BlockMultipliers};
use crate::geom::{evaluate_prediction, mean_std, EvalProtocol, Mesh};
use crate::loss::{evaluate, landmark_loss, photometric_loss, FitTarget, LossContext, LossWeights};
use crate::model::{CoefficientVector, MorphableModel};
use crate::render::forward;

pub const FEATURE_COUNT: usize = 8;
pub const HIDDEN_UNITS: usize = 32;

/// Smallest admissible per-entry confidence sum.
pub const MIN_CONFIDENCE_SUM: f64 = 1e-12;

/// Output logits are clamped to ±this so confidences stay strictly inside
/// (0, 1) in floating point.
pub const LOGIT_LIMIT: f64 = 20.0;

pub type Features = [f64; FEATURE_COUNT];

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "photometric_loss",
    "landmark_loss",
    "abs_yaw",
    "abs_pitch",
    "mean_attention",
    "covered_fraction",
    "mean_abs_alpha",
    "mean_abs_beta",
];

fn check_set(alphas: &[Vec<f64>]) -> Result<usize> {
    let first = alphas
        .first()
        .ok_or_else(|| Error::InvalidInput("aggregation needs at least one image".into()))?;
    for a in alphas {
        check_len("identity coefficients", first.len(), a.len())?;
    }
    Ok(first.len())
}

fn check_confidence(c: f64) -> Result<()> {
    if c.is_finite() && c > 0.0 {
        Ok(())
    } else {
        Err(Error::InvariantViolation(format!("confidence {c} is not positive")))
    }
}

/// `Σ c·a / Σ c` over `(c, a)` pairs. Terms are summed in sorted order so the
/// result does not depend on image order, equal weights reduce to the plain
/// mean bit for bit, and the result is clamped into `[min a, max a]`.
fn weighted_mean(pairs: &mut [(f64, f64)]) -> Result<f64> {
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let (lo, hi) = pairs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.1), hi.max(p.1))
    });
    if pairs.iter().all(|p| p.0 == pairs[0].0) {
        if !(pairs[0].0 * pairs.len() as f64 > MIN_CONFIDENCE_SUM) {
            return Err(Error::InvariantViolation("confidence sum is not positive".into()));
        }
        return Ok((pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64).clamp(lo, hi));
    }
    let total: f64 = pairs.iter().map(|p| p.0).sum();
    if !(total > MIN_CONFIDENCE_SUM) {
        return Err(Error::InvariantViolation(format!(
            "confidence sum {total} is not positive"
        )));
    }
    Ok((pairs.iter().map(|p| p.0 * p.1).sum::<f64>() / total).clamp(lo, hi))
}

/// Plain average of the identity coefficients.
pub fn shape_average(alphas: &[Vec<f64>]) -> Result<Vec<f64>> {
    aggregate_global(alphas, &vec![1.0; alphas.len()])
}

/// Per-entry weighted average `Σ_j c^j_k α^j_k / Σ_j c^j_k` (S4).
pub fn aggregate_elementwise(alphas: &[Vec<f64>], confidences: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = check_set(alphas)?;
    check_len("confidence vectors", alphas.len(), confidences.len())?;
    for c in confidences {
        check_len("confidence entries", k, c.len())?;
        c.iter().try_for_each(|&v| check_confidence(v))?;
    }
    let mut pairs = Vec::with_capacity(alphas.len());
    (0..k)
        .map(|i| {
            pairs.clear();
            pairs.extend(confidences.iter().zip(alphas).map(|(c, a)| (c[i], a[i])));
            weighted_mean(&mut pairs)
        })
        .collect()
}

/// One scalar weight per image (S1, and S2 via [`confidence_sums`]).
pub fn aggregate_global(alphas: &[Vec<f64>], scalars: &[f64]) -> Result<Vec<f64>> {
    let k = check_set(alphas)?;
    check_len("confidence scalars", alphas.len(), scalars.len())?;
    scalars.iter().try_for_each(|&v| check_confidence(v))?;
    let mut pairs = Vec::with_capacity(alphas.len());
    (0..k)
        .map(|i| {
            pairs.clear();
            pairs.extend(scalars.iter().zip(alphas).map(|(c, a)| (*c, a[i])));
            weighted_mean(&mut pairs)
        })
        .collect()
}

/// `Σ_k c^j_k` per image.
pub fn confidence_sums(confidences: &[Vec<f64>]) -> Vec<f64> {
    confidences.iter().map(|c| c.iter().sum()).collect()
}

pub fn aggregate_global_sums(alphas: &[Vec<f64>], confidences: &[Vec<f64>]) -> Result<Vec<f64>> {
    aggregate_global(alphas, &confidence_sums(confidences))
}

/// The image with the largest confidence sum (S3); ties go to the lowest
/// index.
pub fn select_max_confidence(alphas: &[Vec<f64>], confidences: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    check_set(alphas)?;
    check_len("confidence vectors", alphas.len(), confidences.len())?;
    let sums = confidence_sums(confidences);
    let mut best = 0;
    for (j, s) in sums.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::InvariantViolation(format!(
                "confidence sum {s} of image {j} is not finite"
            )));
        }
        if *s > sums[best] {
            best = j;
        }
    }
    Ok((best, alphas[best].clone()))
}

/// Raw per-image features of a frozen fit, before standardization.
pub fn confidence_features(ctx: &LossContext<'_>, target: &FitTarget, x: &CoefficientVector) -> Result<Features> {
    let fwd = forward(ctx.model, x, ctx.camera, &ctx.render)?;
    let photo = photometric_loss(&target.image, &fwd.buffer, &target.attention, ctx.photo_norm)?;
    let lms = fwd.landmarks(ctx.model);
    let lan = landmark_loss(&target.landmarks, &lms.points, &lms.weights)?;
    let covered = fwd.buffer.covered_pixels();
    let mean_attention = if covered == 0 {
        0.0
    } else {
        fwd.buffer
            .mask
            .iter()
            .zip(&target.attention)
            .filter(|(m, _)| **m)
            .map(|(_, a)| a)
            .sum::<f64>()
            / covered as f64
    };
    let mean_abs = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|a| a.abs()).sum::<f64>() / v.len() as f64
        }
    };
    Ok([
        photo,
        lan,
        x.pose.yaw().abs(),
        x.pose.pitch().abs(),
        mean_attention,
        covered as f64 / fwd.buffer.mask.len().max(1) as f64,
        mean_abs(&x.alpha),
        mean_abs(&x.beta),
    ])
}

/// Corpus statistics used to standardize features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Features,
    pub std: Features,
}

impl Default for FeatureStats {
    fn default() -> Self {
        FeatureStats {
            mean: [0.0; FEATURE_COUNT],
            std: [1.0; FEATURE_COUNT],
        }
    }
}

impl FeatureStats {
    pub fn from_features(features: &[Features]) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidInput("no features to standardize".into()));
        }
        let n = features.len() as f64;
        let mut stats = FeatureStats::default();
        for i in 0..FEATURE_COUNT {
            let mean = features.iter().map(|f| f[i]).sum::<f64>() / n;
            let var = features.iter().map(|f| (f[i] - mean).powi(2)).sum::<f64>() / n;
            stats.mean[i] = mean;
            // Constant features pass through centered.
            stats.std[i] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(stats)
    }

    pub fn standardize(&self, f: &Features) -> Features {
        std::array::from_fn(|i| (f[i] - self.mean[i]) / self.std[i])
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Two-layer perceptron from standardized features to confidences in (0, 1).
/// `outputs` is the identity dimension for element-wise confidences or 1
/// for a single global score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePredictor {
    pub outputs: usize,
    pub stats: FeatureStats,
    /// `HIDDEN_UNITS × FEATURE_COUNT`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `outputs × HIDDEN_UNITS`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

struct PredictorCache {
    input: Features,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    output: Vec<f64>,
}

impl ConfidencePredictor {
    /// Random first layer; zero output layer, so every confidence starts at
    /// 1/2 and aggregation starts as plain averaging.
    pub fn new(outputs: usize, stats: FeatureStats, seed: u64) -> Result<Self> {
        if outputs == 0 {
            return Err(Error::InvalidInput("predictor needs at least one output".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (FEATURE_COUNT + HIDDEN_UNITS) as f64).sqrt();
        Ok(ConfidencePredictor {
            outputs,
            stats,
            w1: (0..HIDDEN_UNITS * FEATURE_COUNT)
                .map(|_| rng.random_range(-bound..bound))
                .collect(),
            b1: vec![0.0; HIDDEN_UNITS],
            w2: vec![0.0; outputs * HIDDEN_UNITS],
            b2: vec![0.0; outputs],
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_len("predictor w1", HIDDEN_UNITS * FEATURE_COUNT, self.w1.len())?;
        check_len("predictor b1", HIDDEN_UNITS, self.b1.len())?;
        check_len("predictor w2", self.outputs * HIDDEN_UNITS, self.w2.len())?;
        check_len("predictor b2", self.outputs, self.b2.len())?;
        if self.outputs == 0 {
            return Err(Error::InvalidInput("predictor needs at least one output".into()));
        }
        if self
            .params()
            .iter()
            .chain(&self.stats.mean)
            .chain(&self.stats.std)
            .any(|v| !v.is_finite())
            || self.stats.std.iter().any(|s| *s <= 0.0)
        {
            return Err(Error::InvalidInput("predictor parameters must be finite".into()));
        }
        Ok(())
    }

    fn run(&self, raw: &Features) -> PredictorCache {
        let input = self.stats.standardize(raw);
        let hidden: Vec<f64> = (0..HIDDEN_UNITS)
            .map(|h| {
                let row = &self.w1[h * FEATURE_COUNT..(h + 1) * FEATURE_COUNT];
                (self.b1[h] + row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>()).tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..self.outputs)
            .map(|o| {
                let row = &self.w2[o * HIDDEN_UNITS..(o + 1) * HIDDEN_UNITS];
                self.b2[o] + row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        let output = logits
            .iter()
            .map(|z| sigmoid(z.clamp(-LOGIT_LIMIT, LOGIT_LIMIT)))
            .collect();
        PredictorCache {
            input,
            hidden,
            logits,
            output,
        }
    }

    pub fn predict(&self, raw: &Features) -> Vec<f64> {
        self.run(raw).output
    }

    /// Accumulates `∂L/∂params` given `∂L/∂c` into `grad`.
    fn backward(&self, cache: &PredictorCache, dc: &[f64], grad: &mut [f64]) {
        let (gw1, rest) = grad.split_at_mut(self.w1.len());
        let (gb1, rest) = rest.split_at_mut(self.b1.len());
        let (gw2, gb2) = rest.split_at_mut(self.w2.len());
        let mut dhidden = vec![0.0; HIDDEN_UNITS];
        for o in 0..self.outputs {
            if cache.logits[o].abs() >= LOGIT_LIMIT {
                continue;
            }
            let c = cache.output[o];
            let dz = dc[o] * c * (1.0 - c);
            gb2[o] += dz;
            for h in 0..HIDDEN_UNITS {
                gw2[o * HIDDEN_UNITS + h] += dz * cache.hidden[h];
                dhidden[h] += dz * self.w2[o * HIDDEN_UNITS + h];
            }
        }
        for h in 0..HIDDEN_UNITS {
            let dz = dhidden[h] * (1.0 - cache.hidden[h] * cache.hidden[h]);
            gb1[h] += dz;
            for i in 0..FEATURE_COUNT {
                gw1[h * FEATURE_COUNT + i] += dz * cache.input[i];
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Trainable parameters in the order w1, b1, w2, b2.
    pub fn params(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len("predictor parameters", self.param_count(), p.len())?;
        let (a, rest) = p.split_at(self.w1.len());
        let (b, rest) = rest.split_at(self.b1.len());
        let (c, d) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(a);
        self.b1.copy_from_slice(b);
        self.w2.copy_from_slice(c);
        self.b2.copy_from_slice(d);
        Ok(())
    }

    /// Confidences of every image in a set, broadcast to `k` entries.
    pub fn set_confidences(&self, features: &[Features], k: usize) -> Vec<Vec<f64>> {
        features
            .iter()
            .map(|f| {
                let c = self.predict(f);
                if self.outputs == 1 {
                    vec![c[0]; k]
                } else {
                    c
                }
            })
            .collect()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        crate::write_atomic(path.as_ref(), s.as_bytes())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: ConfidencePredictor = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
        p.validate()?;
        Ok(p)
    }
}

/// One image of a set with its frozen single-image fit.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub target: FitTarget,
    pub x: CoefficientVector,
    pub features: Features,
}

impl ImageRecord {
    pub fn new(ctx: &LossContext<'_>, target: FitTarget, x: CoefficientVector) -> Result<Self> {
        x.dims_match(ctx.model.dims())?;
        let features = confidence_features(ctx, &target, &x)?;
        Ok(ImageRecord { target, x, features })
    }
}

#[derive(Debug, Clone)]
pub struct ImageSet {
    pub images: Vec<ImageRecord>,
}

impl ImageSet {
    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.images.iter().map(|r| r.x.alpha.clone()).collect()
    }

    pub fn features(&self) -> Vec<Features> {
        self.images.iter().map(|r| r.features).collect()
    }
}

/// Aggregates a set with the predictor: element-wise for vector outputs,
/// global for a scalar output.
pub fn aggregate_with(predictor: &ConfidencePredictor, alphas: &[Vec<f64>], features: &[Features]) -> Result<Vec<f64>> {
    let k = check_set(alphas)?;
    check_len("feature vectors", alphas.len(), features.len())?;
    if predictor.outputs != 1 {
        check_len("predictor outputs", k, predictor.outputs)?;
    }
    let c = predictor.set_confidences(features, k);
    if predictor.outputs == 1 {
        aggregate_global(alphas, &c.iter().map(|c| c[0]).collect::<Vec<_>>())
    } else {
        aggregate_elementwise(alphas, &c)
    }
}

/// Multi-image loss of one set: the mean single-image loss of every image
/// re-rendered with the aggregated identity and its own other coefficients.
/// With `with_gradient`, also returns the gradient w.r.t. predictor
/// parameters.
pub fn set_loss(
    ctx: &LossContext<'_>,
    predictor: &ConfidencePredictor,
    set: &ImageSet,
    with_gradient: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let alphas = set.alphas();
    let k = check_set(&alphas)?;
    let m = alphas.len();
    if predictor.outputs != 1 {
        check_len("predictor outputs", k, predictor.outputs)?;
    }
    let caches: Vec<PredictorCache> = set.images.iter().map(|r| predictor.run(&r.features)).collect();
    let conf: Vec<Vec<f64>> = caches
        .iter()
        .map(|c| {
            if predictor.outputs == 1 {
                vec![c.output[0]; k]
            } else {
                c.output.clone()
            }
        })
        .collect();
    let aggr = aggregate_elementwise(&alphas, &conf)?;

    let per_image: Vec<(f64, Option<Vec<f64>>)> = set
        .images
        .par_iter()
        .map(|r| {
            let mut x = r.x.clone();
            x.alpha.clone_from(&aggr);
            let (l, g) = evaluate(ctx, &r.target, &x, with_gradient)?;
            Ok((l.total, g.map(|g| g[..k].to_vec())))
        })
        .collect::<Result<_>>()?;
    let loss = per_image.iter().map(|p| p.0).sum::<f64>() / m as f64;
    if !with_gradient {
        return Ok((loss, None));
    }

    let mut g_aggr = vec![0.0; k];
    for (_, g) in &per_image {
        for (a, b) in g_aggr.iter_mut().zip(g.as_ref().expect("gradient requested")) {
            *a += b / m as f64;
        }
    }
    // ∂α_aggr,k / ∂c^j_k = (α^j_k − α_aggr,k) / Σ_j c^j_k
    let sums: Vec<f64> = (0..k).map(|i| conf.iter().map(|c| c[i]).sum()).collect();
    let mut grad = vec![0.0; predictor.param_count()];
    for (j, cache) in caches.iter().enumerate() {
        let dc: Vec<f64> = (0..k).map(|i| g_aggr[i] * (alphas[j][i] - aggr[i]) / sums[i]).collect();
        let dc = if predictor.outputs == 1 {
            vec![dc.iter().sum()]
        } else {
            dc
        };
        predictor.backward(cache, &dc, &mut grad);
    }
    Ok((loss, Some(grad)))
}

/// Mean [`set_loss`] over a corpus.
pub fn corpus_loss(
    ctx: &LossContext<'_>,
    predictor: &ConfidencePredictor,
    sets: &[ImageSet],
    with_gradient: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if sets.is_empty() {
        return Err(Error::InvalidInput("empty training corpus".into()));
    }
    let n = sets.len() as f64;
    let mut loss = 0.0;
    let mut grad = with_gradient.then(|| vec![0.0; predictor.param_count()]);
    for set in sets {
        let (l, g) = set_loss(ctx, predictor, set, with_gradient)?;
        loss += l / n;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b / n);
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam: AdamParams,
    pub weights: LossWeights,
    /// Adam steps per epoch that re-fit each image's non-identity
    /// coefficients to the current aggregated identity, warm-started across
    /// epochs. Zero keeps the single-image fits frozen.
    pub refit_steps: usize,
    pub refit_learning_rate: f64,
    pub refit_multipliers: BlockMultipliers,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 0.02,
            adam: AdamParams::default(),
            weights: LossWeights::multi_image(),
            refit_steps: 3,
            refit_learning_rate: 0.01,
            refit_multipliers: BlockMultipliers::default(),
        }
    }
}

/// Moves the non-identity coefficients of every image towards the optimum
/// for the set's current aggregated identity.
fn refit_others(
    ctx: &LossContext<'_>,
    predictor: &ConfidencePredictor,
    sets: &mut [ImageSet],
    states: &mut [Vec<AdamState>],
    config: &TrainConfig,
) -> Result<()> {
    let scale = config.refit_multipliers.expand(ctx.model);
    for (set, states) in sets.iter_mut().zip(states.iter_mut()) {
        let aggr = aggregate_with(predictor, &set.alphas(), &set.features())?;
        let k = aggr.len();
        set.images
            .par_iter_mut()
            .zip(states.par_iter_mut())
            .try_for_each(|(r, state)| -> Result<()> {
                let own = std::mem::replace(&mut r.x.alpha, aggr.clone());
                for _ in 0..config.refit_steps {
                    let (_, g) = evaluate(ctx, &r.target, &r.x, true)?;
                    let mut g = g.expect("gradient requested");
                    g[..k].iter_mut().for_each(|v| *v = 0.0);
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteGradient("refit"));
                    }
                    let mut flat = r.x.flatten();
                    adam_step(state, &mut flat, &g, config.refit_learning_rate, &config.adam, &scale)?;
                    r.x = CoefficientVector::unflatten(&flat, ctx.model.dims())?;
                }
                r.x.alpha = own;
                Ok(())
            })?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters with the lowest corpus loss seen.
    pub predictor: ConfidencePredictor,
    /// Corpus loss per epoch; entry 0 is the initial predictor.
    pub losses: Vec<f64>,
    /// Best-so-far loss per epoch.
    pub best: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
#[error("{error} (after {} epochs)", .losses.len())]
pub struct TrainFailure {
    #[source]
    pub error: Error,
    pub losses: Vec<f64>,
}

/// Full-batch Adam on the corpus loss. `ctx.weights` is replaced by
/// `config.weights`. Features and the identities being aggregated always
/// come from the original fits.
pub fn train_confidence(
    ctx: &LossContext<'_>,
    predictor: &ConfidencePredictor,
    sets: &[ImageSet],
    config: &TrainConfig,
) -> Result<TrainResult, TrainFailure> {
    let fail = |error: Error, losses: &[f64]| TrainFailure {
        error,
        losses: losses.to_vec(),
    };
    predictor.validate().map_err(|e| fail(e, &[]))?;
    config.weights.validate().map_err(|e| fail(e, &[]))?;
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(fail(
            Error::InvalidInput(format!("learning rate {} must be positive", config.learning_rate)),
            &[],
        ));
    }
    if config.refit_steps > 0 && !(config.refit_learning_rate > 0.0 && config.refit_learning_rate.is_finite()) {
        return Err(fail(
            Error::InvalidInput(format!(
                "refit learning rate {} must be positive",
                config.refit_learning_rate
            )),
            &[],
        ));
    }
    let ctx = ctx.with_weights(config.weights);
    let mut working = sets.to_vec();
    let mut refit_states: Vec<Vec<AdamState>> = sets
        .iter()
        .map(|s| s.images.iter().map(|r| AdamState::new(r.x.len())).collect())
        .collect();
    let mut current = predictor.clone();
    let mut params = current.params();
    let mut adam = AdamState::new(params.len());
    let scale = vec![1.0; params.len()];
    let mut losses = Vec::with_capacity(config.epochs + 1);
    let mut best_curve = Vec::with_capacity(config.epochs + 1);
    let mut best = (f64::INFINITY, current.clone());
    for epoch in 0..=config.epochs {
        let last = epoch == config.epochs;
        let (loss, grad) = corpus_loss(&ctx, &current, &working, !last).map_err(|e| fail(e, &losses))?;
        if !loss.is_finite() || grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(fail(Error::Diverged { iteration: epoch, loss }, &losses));
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, current.clone());
        }
        best_curve.push(best.0);
        log::debug!("confidence epoch {epoch}: loss {loss:.6}");
        if let Some(g) = grad {
            adam_step(&mut adam, &mut params, &g, config.learning_rate, &config.adam, &scale)
                .map_err(|e| fail(e, &losses))?;
            current.set_params(&params).map_err(|e| fail(e, &losses))?;
            if config.refit_steps > 0 {
                refit_others(&ctx, &current, &mut working, &mut refit_states, config).map_err(|e| fail(e, &losses))?;
            }
        }
    }
    Ok(TrainResult {
        predictor: best.1,
        losses,
        best: best_curve,
    })
}

/// A set with ground truth for strategy comparison.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub alphas: Vec<Vec<f64>>,
    pub features: Vec<Features>,
    pub truth: Mesh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRow {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub per_set: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub rows: Vec<StrategyRow>,
}

impl StrategyReport {
    pub fn row(&self, name: &str) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl std::fmt::Display for StrategyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        for r in &self.rows {
            writeln!(f, "{:<width$}  {:.3}±{:.3}", r.name, r.mean, r.std)?;
        }
        Ok(())
    }
}

pub const ROW_PER_FRAME: &str = "mean per-frame error";
pub const ROW_AVERAGE: &str = "shape averaging";
pub const ROW_S1: &str = "S1 global c";
pub const ROW_S2: &str = "S2 global sum c";
pub const ROW_S3: &str = "S3 max confidence";
pub const ROW_S4: &str = "S4 element-wise";

/// Neutral-shape mesh of `alpha` with the model's topology.
pub fn identity_mesh(model: &MorphableModel, alpha: &[f64]) -> Result<Mesh> {
    Mesh::new(
        model.neutral_shape(alpha)?,
        model.triangles.clone(),
        Some(model.nose_tip),
    )
}

/// Geometric error of every strategy on every set. `scalar` adds the S1 row.
pub fn evaluate_strategies(
    model: &MorphableModel,
    sets: &[EvalSet],
    vector: &ConfidencePredictor,
    scalar: Option<&ConfidencePredictor>,
    protocol: &EvalProtocol,
) -> Result<StrategyReport> {
    if sets.is_empty() {
        return Err(Error::InvalidInput("no evaluation sets".into()));
    }
    let error = |alpha: &[f64], truth: &Mesh| evaluate_prediction(&identity_mesh(model, alpha)?, truth, protocol);
    let per_set: Vec<Vec<f64>> = sets
        .par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let k = check_set(&s.alphas)?;
            let frames = s
                .alphas
                .iter()
                .map(|a| error(a, &s.truth))
                .collect::<Result<Vec<_>>>()?;
            let c = vector.set_confidences(&s.features, k);
            let mut row = vec![
                frames.iter().sum::<f64>() / frames.len() as f64,
                error(&shape_average(&s.alphas)?, &s.truth)?,
            ];
            if let Some(p) = scalar {
                row.push(error(&aggregate_with(p, &s.alphas, &s.features)?, &s.truth)?);
            }
            row.push(error(&aggregate_global_sums(&s.alphas, &c)?, &s.truth)?);
            // S3 reuses the per-frame error of the chosen image.
            row.push(frames[select_max_confidence(&s.alphas, &c)?.0]);
            row.push(error(&aggregate_elementwise(&s.alphas, &c)?, &s.truth)?);
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mut names = vec![ROW_PER_FRAME, ROW_AVERAGE];
    if scalar.is_some() {
        names.push(ROW_S1);
    }
    names.extend([ROW_S2, ROW_S3, ROW_S4]);
    let rows = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let values: Vec<f64> = per_set.iter().map(|r| r[i]).collect();
            let (mean, std) = mean_std(values.iter().copied());
            StrategyRow {
                name: name.to_string(),
                mean,
                std,
                per_set: values,
            }
        })
        .collect();
    Ok(StrategyReport { rows })
}

/// Mean relative confidence (each entry divided by its mean over the set)
/// per |yaw| bin in degrees; `edges` are the inner bin boundaries.
pub fn confidence_by_pose_bin(
    predictor: &ConfidencePredictor,
    sets: &[(Vec<f64>, Vec<Features>)],
    edges: &[f64],
) -> Result<Vec<Option<Vec<f64>>>> {
    let mut acc: Vec<(Vec<f64>, usize)> = vec![(vec![0.0; predictor.outputs], 0); edges.len() + 1];
    for (yaws, features) in sets {
        check_len("yaw angles", features.len(), yaws.len())?;
        let c: Vec<Vec<f64>> = features.iter().map(|f| predictor.predict(f)).collect();
        let mean: Vec<f64> = (0..predictor.outputs)
            .map(|i| c.iter().map(|v| v[i]).sum::<f64>() / c.len().max(1) as f64)
            .collect();
        for (yaw, cj) in yaws.iter().zip(&c) {
            let bin = edges.iter().filter(|e| yaw.abs() >= **e).count();
            acc[bin].1 += 1;
            for i in 0..predictor.outputs {
                acc[bin].0[i] += cj[i] / mean[i];
            }
        }
    }
    Ok(acc
        .into_iter()
        .map(|(s, n)| (n > 0).then(|| s.iter().map(|v| v / n as f64).collect()))
        .collect())
}
