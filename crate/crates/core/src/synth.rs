//! Synthetic benchmark subjects: random identities rendered over a pose
//! grid, optionally with occluded, degraded frames.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Rgb};
use crate::model::{CoefficientVector, MorphableModel};
use crate::render::{forward, RenderOptions};
use crate::scene::{Camera, Pose, SH_C0};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    pub pitch_deg: f64,
    pub yaw_deg: f64,
}

pub const GRID_PITCH_DEG: [f64; 4] = [-15.0, 0.0, 20.0, 25.0];
pub const GRID_YAW_DEG: [f64; 5] = [-80.0, -40.0, 0.0, 40.0, 80.0];

/// The 20-view benchmark grid, pitch-major.
pub fn default_pose_grid() -> Vec<PoseSpec> {
    GRID_PITCH_DEG
        .iter()
        .flat_map(|&pitch_deg| GRID_YAW_DEG.iter().map(move |&yaw_deg| PoseSpec { pitch_deg, yaw_deg }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub size: usize,
    pub poses: Vec<PoseSpec>,
    /// Uniform ± jitter added to each view's (pitch, yaw, roll), degrees.
    pub angle_jitter_deg: [f64; 3],
    /// Camera distance, mm.
    pub distance: f64,
    /// Uniform ± lateral offset, mm.
    pub translation_jitter: f64,
    pub alpha_std: f64,
    pub beta_std: f64,
    pub delta_std: f64,
    /// Range of the ambient SH irradiance.
    pub ambient: [f64; 2],
    /// Uniform ± range of the non-ambient SH coefficients.
    pub directional: f64,
    pub background: Rgb,
    /// Uniform ± landmark detection noise, px.
    pub landmark_jitter: f64,
    /// Probability that a view is degraded: an occluder rectangle over part
    /// of the face and `degraded_landmark_jitter` instead of the clean jitter.
    pub occlusion: f64,
    pub degraded_landmark_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 224,
            poses: default_pose_grid(),
            angle_jitter_deg: [0.0; 3],
            distance: 1000.0,
            translation_jitter: 10.0,
            alpha_std: 1.0,
            beta_std: 0.5,
            delta_std: 1.0,
            ambient: [0.8, 1.0],
            directional: 0.2,
            background: [0.0; 3],
            landmark_jitter: 0.0,
            occlusion: 0.0,
            degraded_landmark_jitter: 6.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::InvalidInput(format!("image size {} too small", self.size)));
        }
        if self.poses.is_empty() {
            return Err(Error::InvalidInput("pose list is empty".into()));
        }
        let nonneg = [
            self.distance,
            self.translation_jitter,
            self.alpha_std,
            self.beta_std,
            self.delta_std,
            self.directional,
            self.landmark_jitter,
            self.degraded_landmark_jitter,
        ];
        if nonneg
            .iter()
            .chain(&self.angle_jitter_deg)
            .any(|v| !(v.is_finite() && *v >= 0.0))
            || self.distance <= 0.0
        {
            return Err(Error::InvalidInput(
                "synthesis ranges must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return Err(Error::InvalidInput(format!(
                "occlusion probability {} not in [0, 1]",
                self.occlusion
            )));
        }
        if !(self.ambient[0] > 0.0 && self.ambient[0] <= self.ambient[1] && self.ambient[1].is_finite()) {
            return Err(Error::InvalidInput(format!("bad ambient range {:?}", self.ambient)));
        }
        Ok(())
    }

    pub fn camera(&self) -> Camera {
        Camera::default_for(self.size, self.size)
    }
}

/// Axis-aligned rectangle `[x0, x1) × [y0, y1)` painted over the image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occluder {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub color: Rgb,
}

impl Occluder {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..self.x1).contains(&x) && (self.y0..self.y1).contains(&y)
    }

    pub fn paint(&self, image: &mut Image) {
        for y in self.y0..self.y1.min(image.height) {
            for x in self.x0..self.x1.min(image.width) {
                image.set(x, y, self.color);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthView {
    pub pose: PoseSpec,
    pub x: CoefficientVector,
    pub image: Image,
    pub landmarks: Vec<[f64; 2]>,
    pub occluder: Option<Occluder>,
}

#[derive(Debug, Clone)]
pub struct SynthSubject {
    pub alpha: Vec<f64>,
    pub delta: Vec<f64>,
    pub views: Vec<SynthView>,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let s: f64 = StandardNormal.sample(rng);
    s * std
}

/// Covers a random half (left, right, upper or lower) of the face's
/// bounding box with a saturated, non-skin color.
fn random_occluder(mask: &[bool], width: usize, rng: &mut ChaCha8Rng) -> Option<Occluder> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        let (x, y) = (i % width, i / width);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    if x0 >= x1 || y0 >= y1 {
        return None;
    }
    let (mx, my) = ((x0 + x1) / 2, (y0 + y1) / 2);
    let (x0, y0, x1, y1) = match rng.random_range(0..4) {
        0 => (x0, y0, mx, y1),
        1 => (mx, y0, x1, y1),
        2 => (x0, y0, x1, my),
        _ => (x0, my, x1, y1),
    };
    let palette: [Rgb; 4] = [[0.1, 0.3, 0.8], [0.15, 0.6, 0.2], [0.9, 0.9, 0.95], [0.05, 0.05, 0.08]];
    Some(Occluder {
        x0,
        y0,
        x1,
        y1,
        color: palette[rng.random_range(0..palette.len())],
    })
}

const DEGRADE_SEED_MASK: u64 = 0x5eed_0cc1_u64 << 16;

/// Renders subject `index` deterministically from `seed`.
pub fn synthesize_subject(model: &MorphableModel, config: &SynthConfig, seed: u64, index: u64) -> Result<SynthSubject> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    // Degradation has its own stream so a clean and an occluded corpus with
    // the same seed share every base render.
    let mut degrade_rng = ChaCha8Rng::seed_from_u64(seed ^ DEGRADE_SEED_MASK);
    degrade_rng.set_stream(index);
    let dims = model.dims();
    let alpha: Vec<f64> = (0..dims.id).map(|_| normal(&mut rng, config.alpha_std)).collect();
    let delta: Vec<f64> = (0..dims.tex).map(|_| normal(&mut rng, config.delta_std)).collect();
    let camera = config.camera();
    let options = RenderOptions {
        background: config.background,
    };
    let mut views = Vec::with_capacity(config.poses.len());
    for pose in &config.poses {
        let mut x = CoefficientVector::zeros(dims);
        x.alpha.clone_from(&alpha);
        x.delta.clone_from(&delta);
        x.beta = (0..dims.exp).map(|_| normal(&mut rng, config.beta_std)).collect();
        x.gamma[0] = rng.random_range(config.ambient[0]..=config.ambient[1]) / SH_C0;
        for g in &mut x.gamma[1..] {
            *g = if config.directional > 0.0 {
                rng.random_range(-config.directional..config.directional)
            } else {
                0.0
            };
        }
        let mut jitter = |r: f64| if r > 0.0 { rng.random_range(-r..r) } else { 0.0 };
        let [jp, jy, jr] = config.angle_jitter_deg;
        let angles = [pose.pitch_deg + jitter(jp), pose.yaw_deg + jitter(jy), jitter(jr)];
        let t = config.translation_jitter;
        let translation = [jitter(t), jitter(t), config.distance];
        x.pose = Pose::new(
            angles[0].to_radians(),
            angles[1].to_radians(),
            angles[2].to_radians(),
            translation,
        );

        let fwd = forward(model, &x, &camera, &options)?;
        let mut image = fwd.buffer.image();
        let degraded = degrade_rng.random_bool(config.occlusion);
        let occluder = if degraded {
            random_occluder(&fwd.buffer.mask, camera.width, &mut degrade_rng)
        } else {
            None
        };
        if let Some(o) = &occluder {
            o.paint(&mut image);
        }
        let noise = if degraded {
            config.degraded_landmark_jitter
        } else {
            config.landmark_jitter
        };
        let landmarks = fwd
            .landmarks(model)
            .points
            .into_iter()
            .map(|p| {
                if noise > 0.0 {
                    [
                        p[0] + degrade_rng.random_range(-noise..noise),
                        p[1] + degrade_rng.random_range(-noise..noise),
                    ]
                } else {
                    p
                }
            })
            .collect();
        views.push(SynthView {
            pose: PoseSpec {
                pitch_deg: angles[0],
                yaw_deg: angles[1],
            },
            x,
            image: image.quantized(),
            landmarks,
            occluder,
        });
    }
    Ok(SynthSubject { alpha, delta, views })
}
