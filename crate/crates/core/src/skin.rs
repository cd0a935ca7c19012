//! Gaussian-mixture naive-Bayes skin classifier and the attention mask used to
//! weight the photometric loss.

use std::path::Path;

use nalgebra::{Cholesky, Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};

/// Smallest allowed covariance eigenvalue.
pub const COVARIANCE_FLOOR: f64 = 1e-6;
pub const EM_MAX_ITERATIONS: usize = 200;
pub const EM_TOLERANCE: f64 = 1e-6;
/// Component count used for each class unless overridden.
pub const DEFAULT_COMPONENTS: usize = 8;
/// Log-density below which `exp` underflows in f64.
const LOG_UNDERFLOW: f64 = -745.0;

/// A single full-covariance Gaussian mixture over RGB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm {
    pub weights: Vec<f64>,
    pub means: Vec<Rgb>,
    pub covariances: Vec<[[f64; 3]; 3]>,
}

#[derive(Debug, Clone)]
struct Component {
    log_norm: f64,
    mean: Vector3<f64>,
    chol: Cholesky<f64, nalgebra::U3>,
}

/// Pre-factorized mixture for repeated density evaluation.
#[derive(Debug, Clone)]
pub struct CompiledGmm {
    components: Vec<Component>,
}

fn to_matrix(c: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| c[i][j])
}

fn from_matrix(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

impl Gmm {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.covariances.len() != k {
            return Err(Error::InvariantViolation("GMM component arrays disagree".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvariantViolation("negative GMM weight".into()));
        }
        let s: f64 = self.weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvariantViolation(format!("GMM weights sum to {s}")));
        }
        for c in &self.covariances {
            let m = to_matrix(c);
            if (m - m.transpose()).abs().max() > 1e-9 * m.abs().max().max(1.0) {
                return Err(Error::InvariantViolation("covariance not symmetric".into()));
            }
            if Cholesky::new(m).is_none() {
                return Err(Error::InvariantViolation("covariance not positive definite".into()));
            }
        }
        Ok(())
    }

    pub fn compile(&self) -> Result<CompiledGmm> {
        self.validate()?;
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let components = (0..self.components())
            .map(|k| {
                let chol = Cholesky::new(to_matrix(&self.covariances[k])).expect("validated");
                let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                Component {
                    log_norm: self.weights[k].ln() - 0.5 * (3.0 * ln_2pi + log_det),
                    mean: Vector3::from(self.means[k]),
                    chol,
                }
            })
            .collect();
        Ok(CompiledGmm { components })
    }
}

impl CompiledGmm {
    fn component_log(&self, x: &Vector3<f64>, out: &mut Vec<f64>) {
        out.clear();
        for c in &self.components {
            let d = x - c.mean;
            let y = c.chol.l().solve_lower_triangular(&d).expect("nonsingular");
            out.push(c.log_norm - 0.5 * y.norm_squared());
        }
    }

    /// `log p(x)`.
    pub fn log_density(&self, rgb: Rgb) -> f64 {
        let mut buf = Vec::with_capacity(self.components.len());
        self.component_log(&Vector3::from(rgb), &mut buf);
        log_sum_exp(&buf)
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Result of EM fitting.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub gmm: Gmm,
    /// Mean per-sample log-likelihood after each EM iteration.
    pub log_likelihood: Vec<f64>,
    pub reseeded: usize,
}

fn covariance_of(samples: &[Vector3<f64>], resp: Option<(&[f64], usize, usize)>) -> Matrix3<f64> {
    // resp: (responsibility table, component, component count)
    let mut total = 0.0;
    let mut mean = Vector3::zeros();
    for (i, x) in samples.iter().enumerate() {
        let w = resp.map_or(1.0, |(r, k, kk)| r[i * kk + k]);
        total += w;
        mean += x * w;
    }
    mean /= total;
    let mut cov = Matrix3::zeros();
    for (i, x) in samples.iter().enumerate() {
        let w = resp.map_or(1.0, |(r, k, kk)| r[i * kk + k]);
        let d = x - mean;
        cov += d * d.transpose() * w;
    }
    cov / total
}

fn floor_covariance(cov: Matrix3<f64>) -> Matrix3<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.min() >= COVARIANCE_FLOOR {
        return sym;
    }
    let vals = eig.eigenvalues.map(|v| v.max(COVARIANCE_FLOOR));
    let m = eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (m + m.transpose()) * 0.5
}

/// Fits a `components`-component GMM by EM from a k-means++ seeding.
pub fn fit_gmm(samples: &[Rgb], components: usize, seed: u64) -> Result<GmmFit> {
    if components == 0 {
        return Err(Error::InvalidInput("GMM needs at least one component".into()));
    }
    if samples.len() < 10 * components {
        return Err(Error::InvalidInput(format!(
            "{} samples is fewer than 10x {components} components",
            samples.len()
        )));
    }
    let xs: Vec<Vector3<f64>> = samples.iter().map(|s| Vector3::from(*s)).collect();
    let n = xs.len();
    let k = components;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centers = vec![xs[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = xs.iter().map(|x| (x - centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if t < *d {
                    pick = i;
                    break;
                }
                t -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = xs[next];
        for (d, x) in d2.iter_mut().zip(&xs) {
            *d = d.min((x - c).norm_squared());
        }
        centers.push(c);
    }

    let global = floor_covariance(covariance_of(&xs, None));
    let mut assign_count = vec![0usize; k];
    let mut resp = vec![0.0; n * k];
    for (i, x) in xs.iter().enumerate() {
        let j = (0..k)
            .min_by(|&a, &b| {
                (x - centers[a])
                    .norm_squared()
                    .total_cmp(&(x - centers[b]).norm_squared())
            })
            .unwrap();
        resp[i * k + j] = 1.0;
        assign_count[j] += 1;
    }
    let mut gmm = Gmm {
        weights: assign_count.iter().map(|&c| c.max(1) as f64).collect(),
        means: centers.iter().map(|c| [c.x, c.y, c.z]).collect(),
        covariances: (0..k)
            .map(|j| {
                if assign_count[j] >= 4 {
                    from_matrix(&floor_covariance(covariance_of(&xs, Some((&resp, j, k)))))
                } else {
                    from_matrix(&global)
                }
            })
            .collect(),
    };
    let wsum: f64 = gmm.weights.iter().sum();
    gmm.weights.iter_mut().for_each(|w| *w /= wsum);

    let mut trace = Vec::new();
    let mut reseeded = 0;
    let mut buf = Vec::with_capacity(k);
    let mut sample_ll = vec![0.0; n];
    for _ in 0..EM_MAX_ITERATIONS {
        // E-step.
        let compiled = gmm.compile()?;
        let mut ll = 0.0;
        for (i, x) in xs.iter().enumerate() {
            compiled.component_log(x, &mut buf);
            let lse = log_sum_exp(&buf);
            sample_ll[i] = lse;
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (buf[j] - lse).exp();
            }
        }
        let ll = ll / n as f64;
        if let Some(&prev) = trace.last() {
            if ll - prev < EM_TOLERANCE {
                trace.push(ll);
                break;
            }
        }
        trace.push(ll);

        // M-step.
        for j in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + j]).sum();
            if nk < 1e-8 {
                // Empty component: re-seed at the worst-explained sample.
                let worst = (0..n).min_by(|&a, &b| sample_ll[a].total_cmp(&sample_ll[b])).unwrap();
                let x = xs[worst];
                gmm.means[j] = [x.x, x.y, x.z];
                gmm.covariances[j] = from_matrix(&global);
                gmm.weights[j] = 1.0 / n as f64;
                reseeded += 1;
                continue;
            }
            let mut mean = Vector3::zeros();
            for i in 0..n {
                mean += xs[i] * resp[i * k + j];
            }
            mean /= nk;
            let mut cov = Matrix3::zeros();
            for i in 0..n {
                let d = xs[i] - mean;
                cov += d * d.transpose() * resp[i * k + j];
            }
            gmm.means[j] = [mean.x, mean.y, mean.z];
            gmm.covariances[j] = from_matrix(&floor_covariance(cov / nk));
            gmm.weights[j] = nk / n as f64;
        }
        let wsum: f64 = gmm.weights.iter().sum();
        gmm.weights.iter_mut().for_each(|w| *w /= wsum);
    }
    Ok(GmmFit {
        gmm,
        log_likelihood: trace,
        reseeded,
    })
}

/// Two-class naive-Bayes skin classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinGmm {
    pub skin: Gmm,
    pub non_skin: Gmm,
    pub prior_skin: f64,
    pub prior_non_skin: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkinProbability {
    pub p: f64,
    /// Both class densities underflowed; `p` is the skin prior.
    pub fallback: bool,
}

impl SkinGmm {
    pub fn validate(&self) -> Result<()> {
        self.skin.validate()?;
        self.non_skin.validate()?;
        let ok = |p: f64| p > 0.0 && p < 1.0;
        if !ok(self.prior_skin)
            || !ok(self.prior_non_skin)
            || (self.prior_skin + self.prior_non_skin - 1.0).abs() > 1e-9
        {
            return Err(Error::InvariantViolation(format!(
                "class priors ({}, {}) must lie in (0,1) and sum to 1",
                self.prior_skin, self.prior_non_skin
            )));
        }
        Ok(())
    }

    /// Trains both class models; priors come from class frequencies.
    pub fn train(skin: &[Rgb], non_skin: &[Rgb], components: usize, seed: u64) -> Result<Self> {
        let s = fit_gmm(skin, components, seed)?.gmm;
        let ns = fit_gmm(non_skin, components, seed.wrapping_add(1))?.gmm;
        let total = (skin.len() + non_skin.len()) as f64;
        let model = SkinGmm {
            skin: s,
            non_skin: ns,
            prior_skin: skin.len() as f64 / total,
            prior_non_skin: non_skin.len() as f64 / total,
        };
        model.validate()?;
        Ok(model)
    }

    /// Default classifier trained on the built-in synthetic color corpus.
    pub fn synthetic_default() -> Self {
        let corpus = synthetic_skin_corpus(3000, 0x5eed);
        let skin: Vec<Rgb> = corpus.iter().filter(|s| s.1).map(|s| s.0).collect();
        let non: Vec<Rgb> = corpus.iter().filter(|s| !s.1).map(|s| s.0).collect();
        SkinGmm::train(&skin, &non, DEFAULT_COMPONENTS, 0x5eed).expect("synthetic corpus is well-formed")
    }

    pub fn compile(&self) -> Result<CompiledSkin> {
        self.validate()?;
        Ok(CompiledSkin {
            skin: self.skin.compile()?,
            non_skin: self.non_skin.compile()?,
            log_prior_skin: self.prior_skin.ln(),
            log_prior_non_skin: self.prior_non_skin.ln(),
            prior_skin: self.prior_skin,
        })
    }

    pub fn swapped(&self) -> SkinGmm {
        SkinGmm {
            skin: self.non_skin.clone(),
            non_skin: self.skin.clone(),
            prior_skin: self.prior_non_skin,
            prior_non_skin: self.prior_skin,
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        crate::write_atomic(path, text.as_bytes())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: SkinGmm = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }
}

#[derive(Debug, Clone)]
pub struct CompiledSkin {
    skin: CompiledGmm,
    non_skin: CompiledGmm,
    log_prior_skin: f64,
    log_prior_non_skin: f64,
    prior_skin: f64,
}

impl CompiledSkin {
    pub fn probability(&self, rgb: Rgb) -> SkinProbability {
        let ls = self.skin.log_density(rgb);
        let ln = self.non_skin.log_density(rgb);
        if !(ls > LOG_UNDERFLOW) && !(ln > LOG_UNDERFLOW) {
            return SkinProbability {
                p: self.prior_skin,
                fallback: true,
            };
        }
        let a = self.log_prior_skin + ls;
        let b = self.log_prior_non_skin + ln;
        SkinProbability {
            p: 1.0 / (1.0 + (b - a).exp()),
            fallback: false,
        }
    }

    pub fn probability_map(&self, image: &Image) -> Vec<f64> {
        image.pixels.iter().map(|&p| self.probability(p).p).collect()
    }
}

/// `A_i = 1` if `P_i > 0.5`, `P_i` otherwise.
pub fn attention_value(p: f64) -> f64 {
    if p > 0.5 {
        1.0
    } else {
        p
    }
}

pub fn attention_mask(probabilities: &[f64]) -> Vec<f64> {
    probabilities.iter().map(|&p| attention_value(p)).collect()
}

/// Skin reference tones (linear RGB albedo), light to dark.
const SKIN_TONES: [Rgb; 4] = [
    [0.87, 0.68, 0.58],
    [0.80, 0.60, 0.50],
    [0.66, 0.47, 0.37],
    [0.46, 0.32, 0.25],
];

/// Deterministic labeled color corpus: `(rgb, is_skin)`, half skin.
///
/// Skin samples are shaded reference tones; non-skin samples mix uniform
/// colors, grays and saturated cool colors.
pub fn synthetic_skin_corpus(count: usize, seed: u64) -> Vec<(Rgb, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.015).unwrap();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        if i % 2 == 0 {
            let tone = SKIN_TONES[rng.random_range(0..SKIN_TONES.len())];
            let shade = rng.random_range(0.45..1.2);
            let c = tone.map(|t| (t * shade + noise.sample(&mut rng)).clamp(0.0, 1.0));
            out.push((c, true));
        } else {
            let c = match rng.random_range(0..4) {
                0 | 1 => [rng.random(), rng.random(), rng.random()],
                2 => {
                    let g: f64 = rng.random();
                    [g, g, g].map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0))
                }
                _ => {
                    let base: f64 = rng.random_range(0.0..0.5);
                    [base * 0.5, rng.random_range(base..1.0), rng.random_range(0.3..1.0)]
                }
            };
            out.push((c, false));
        }
    }
    out
}

/// Reads a labeled-pixel CSV of `r,g,b,label` rows (values 0–255, label
/// `skin` or `nonskin`). A non-numeric first row is treated as a header.
pub fn load_labeled_csv(path: impl AsRef<Path>) -> Result<Vec<(Rgb, bool)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(path, format!("line {}: expected 4 fields", line_no + 1)));
        }
        let nums: std::result::Result<Vec<f64>, _> = fields[..3].iter().map(|f| f.parse::<f64>()).collect();
        let nums = match nums {
            Ok(v) => v,
            Err(_) if line_no == 0 => continue,
            Err(e) => return Err(Error::parse(path, format!("line {}: {e}", line_no + 1))),
        };
        if nums.iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(Error::parse(
                path,
                format!("line {}: value outside [0, 255]", line_no + 1),
            ));
        }
        let label = match fields[3] {
            "skin" => true,
            "nonskin" => false,
            other => {
                return Err(Error::parse(
                    path,
                    format!("line {}: unknown label {other:?}", line_no + 1),
                ))
            }
        };
        out.push(([nums[0] / 255.0, nums[1] / 255.0, nums[2] / 255.0], label));
    }
    Ok(out)
}

/// Writes samples in the labeled-pixel CSV format.
pub fn write_labeled_csv(samples: &[(Rgb, bool)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("r,g,b,label\n");
    for (c, skin) in samples {
        let q = c.map(|v| (v * 255.0).round() as u8);
        text.push_str(&format!(
            "{},{},{},{}\n",
            q[0],
            q[1],
            q[2],
            if *skin { "skin" } else { "nonskin" }
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fraction of samples classified correctly at `P > 0.5`.
pub fn accuracy(model: &CompiledSkin, samples: &[(Rgb, bool)]) -> f64 {
    let correct = samples
        .iter()
        .filter(|(c, label)| (model.probability(*c).p > 0.5) == *label)
        .count();
    correct as f64 / samples.len() as f64
}
