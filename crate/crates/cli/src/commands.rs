//! Command implementations. Each takes a [`Session`] and explicit paths so
//! tests can drive them without going through argument parsing.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use face3d::aggregate::{
    aggregate_elementwise, aggregate_global, aggregate_global_sums, confidence_sums, evaluate_strategies,
    identity_mesh, select_max_confidence, shape_average, train_confidence, ConfidencePredictor, EvalSet, FeatureStats,
    ImageRecord, ImageSet, StrategyReport, TrainResult,
};
use face3d::fit::{fit_single_image, FitConfig, FitResult, FitTrace};
use face3d::geom::{evaluate_prediction, read_obj, write_obj, write_report, EvalReport, SubjectError};
use face3d::image::Image;
use face3d::loss::{FitTarget, LossBreakdown, LossContext, ProjectionEmbedder};
use face3d::model::{CoefficientVector, MorphableModel};
use face3d::render::{render_image, RenderOptions};
use face3d::scene::Camera;
use face3d::skin::{accuracy, attention_mask, load_labeled_csv, synthetic_skin_corpus, CompiledSkin, SkinGmm};
use face3d::synth::synthesize_subject;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::io::{
    create_dir, read_coefficients, read_landmarks, write_json, write_landmarks, Manifest, ManifestImage, ManifestSet,
    MANIFEST_VERSION,
};

/// Everything a command needs that is derived from the run config.
pub struct Session {
    pub cfg: RunConfig,
    pub model: MorphableModel,
    pub embedder: ProjectionEmbedder,
    pub skin: CompiledSkin,
    pool: rayon::ThreadPool,
}

impl Session {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Session {
            model: cfg.load_model()?,
            embedder: cfg.embedder()?,
            skin: cfg.skin()?,
            pool: cfg.thread_pool()?,
            cfg,
        })
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            seed: self.cfg.seed,
            ..self.cfg.fit.clone()
        }
    }

    fn attention(&self, image: &Image, enabled: bool) -> Vec<f64> {
        if enabled {
            attention_mask(&self.skin.probability_map(image))
        } else {
            vec![1.0; image.len()]
        }
    }

    fn render_options(&self) -> RenderOptions {
        RenderOptions {
            background: self.cfg.fit.background,
        }
    }

    fn load_image(&self, path: &Path) -> Result<Image> {
        Image::load_png(path).with_context(|| format!("loading image {}", path.display()))
    }

    fn fit_files(
        &self,
        image: &Path,
        landmarks: &Path,
    ) -> Result<(FitResult, Camera), (anyhow::Error, Option<FitTrace>)> {
        let prepare = || -> Result<_> {
            let img = self.load_image(image)?;
            let lms = read_landmarks(landmarks, self.model.landmarks.len())?;
            let cam = self.cfg.camera(img.width, img.height)?;
            Ok((img, lms, cam))
        };
        let (img, lms, cam) = prepare().map_err(|e| (e, None))?;
        let skin = self.cfg.attention.fit.then_some(&self.skin);
        match fit_single_image(&self.model, &img, &lms, &cam, &self.fit_config(), &self.embedder, skin) {
            Ok(r) => Ok((r, cam)),
            Err(f) => Err((
                anyhow::Error::new(f.error).context(format!("fitting {}", image.display())),
                Some(f.trace),
            )),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FitReport<'a> {
    pub image: String,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_iteration: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossBreakdown>,
    pub trace: &'a FitTrace,
}

/// Fits one image and writes `coefficients.json`, `mesh.obj` (neutral
/// identity shape), `render.png` and `trace.json` into `out`. A failed fit
/// still writes its trace.
pub fn cmd_fit(s: &Session, image: &Path, landmarks: &Path, out: &Path) -> Result<FitResult> {
    create_dir(out)?;
    let name = image.display().to_string();
    let (r, cam) = match s.install(|| s.fit_files(image, landmarks)) {
        Ok(v) => v,
        Err((e, trace)) => {
            if let Some(trace) = trace {
                let report = FitReport {
                    image: name,
                    status: "failed",
                    error: Some(format!("{e:#}")),
                    best_iteration: None,
                    loss: None,
                    trace: &trace,
                };
                write_json(&out.join("trace.json"), &report)?;
            }
            return Err(e);
        }
    };
    write_json(&out.join("coefficients.json"), &r.x)?;
    write_obj(&identity_mesh(&s.model, &r.x.alpha)?, out.join("mesh.obj"))?;
    render_image(&s.model, &r.x, &cam, &s.render_options())?
        .image()
        .save_png(out.join("render.png"))?;
    let report = FitReport {
        image: name,
        status: "ok",
        error: None,
        best_iteration: Some(r.best_iteration),
        loss: Some(r.loss),
        trace: &r.trace,
    };
    write_json(&out.join("trace.json"), &report)?;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FitStats {
    pub fitted: usize,
    pub cached: usize,
}

/// Fitted coefficients for every image of the manifest, in manifest order.
/// Cached coefficient files are reused unless `force`.
pub fn fit_manifest(s: &Session, manifest: &Manifest, force: bool) -> Result<(Vec<Vec<CoefficientVector>>, FitStats)> {
    let jobs: Vec<&ManifestImage> = manifest.sets.iter().flat_map(|set| &set.images).collect();
    let dims = s.model.dims();
    let results: Vec<Result<(CoefficientVector, bool)>> = s.install(|| {
        jobs.par_iter()
            .map(|im| {
                let coef = manifest.resolve(&im.coefficients);
                if !force && coef.exists() {
                    return Ok((read_coefficients(&coef, dims)?, false));
                }
                let (r, _) = s
                    .fit_files(&manifest.resolve(&im.image), &manifest.resolve(&im.landmarks))
                    .map_err(|(e, _)| e)?;
                write_json(&coef, &r.x)?;
                log::info!("fitted {} (loss {:.5})", im.image.display(), r.loss.total);
                Ok((r.x, true))
            })
            .collect()
    });
    let mut stats = FitStats::default();
    let mut flat = Vec::with_capacity(results.len());
    for r in results {
        let (x, fitted) = r?;
        if fitted {
            stats.fitted += 1;
        } else {
            stats.cached += 1;
        }
        flat.push(x);
    }
    let mut it = flat.into_iter();
    let per_set = manifest
        .sets
        .iter()
        .map(|set| it.by_ref().take(set.images.len()).collect())
        .collect();
    Ok((per_set, stats))
}

/// Fits (or loads) every image and builds the records the aggregator works
/// on. All images must share one size.
pub fn load_corpus(s: &Session, manifest: &Manifest, force: bool) -> Result<(Camera, Vec<ImageSet>)> {
    let (coefs, _) = fit_manifest(s, manifest, force)?;
    let first = manifest.resolve(&manifest.sets[0].images[0].image);
    let probe = s.load_image(&first)?;
    let camera = s.cfg.camera(probe.width, probe.height)?;
    let ctx = LossContext::new(&s.model, &camera, &s.embedder).with_weights(s.cfg.train.weights);
    let attention = s.cfg.attention.aggregate;
    let sets = s.install(|| {
        manifest
            .sets
            .iter()
            .zip(coefs)
            .map(|(set, xs)| -> Result<ImageSet> {
                let images = set
                    .images
                    .par_iter()
                    .zip(xs)
                    .map(|(im, x)| -> Result<ImageRecord> {
                        let path = manifest.resolve(&im.image);
                        let img = s.load_image(&path)?;
                        if img.width != camera.width || img.height != camera.height {
                            bail!(face3d::Error::InvalidInput(format!(
                                "{}: image is {}x{}, expected {}x{}",
                                path.display(),
                                img.width,
                                img.height,
                                camera.width,
                                camera.height
                            )));
                        }
                        let lms = read_landmarks(&manifest.resolve(&im.landmarks), s.model.landmarks.len())?;
                        let a = s.attention(&img, attention);
                        let target = FitTarget::new(img, lms, a, &s.embedder)?;
                        Ok(ImageRecord::new(&ctx, target, x)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(ImageSet { images })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((camera, sets))
}

/// Renders `count` subjects into `out` and writes `out/manifest.json`.
pub fn cmd_synth(s: &Session, count: usize, out: &Path) -> Result<Manifest> {
    if count == 0 {
        bail!(face3d::Error::InvalidInput("subject count must be positive".into()));
    }
    create_dir(out)?;
    let sets = s.install(|| {
        (0..count)
            .into_par_iter()
            .map(|i| -> Result<ManifestSet> {
                let subject = synthesize_subject(&s.model, &s.cfg.synth, s.cfg.seed, i as u64)?;
                let name = format!("subject_{i:03}");
                let dir = out.join(&name);
                create_dir(&dir)?;
                let truth = PathBuf::from(&name).join("truth.obj");
                write_obj(&identity_mesh(&s.model, &subject.alpha)?, out.join(&truth))?;
                let mut images = Vec::with_capacity(subject.views.len());
                for (j, view) in subject.views.iter().enumerate() {
                    let stem = PathBuf::from(&name).join(format!("view_{j:02}"));
                    let with = |ext: &str| stem.with_extension(ext);
                    view.image.save_png(out.join(with("png")))?;
                    write_landmarks(&out.join(with("lm.txt")), &view.landmarks)?;
                    write_json(&out.join(with("truth.json")), &view.x)?;
                    images.push(ManifestImage {
                        image: with("png"),
                        landmarks: with("lm.txt"),
                        coefficients: with("coef.json"),
                        truth_coefficients: Some(with("truth.json")),
                        pitch_deg: Some(view.pose.pitch_deg),
                        yaw_deg: Some(view.pose.yaw_deg),
                        occluder: view.occluder,
                    });
                }
                Ok(ManifestSet {
                    name,
                    truth_mesh: Some(truth),
                    images,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        sets,
        root: out.to_path_buf(),
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Plain mean of the identity vectors.
    Average,
    /// One scalar confidence per image.
    S1,
    /// Image weight = sum of its confidence vector.
    S2,
    /// The image with the largest confidence sum.
    S3,
    /// Per-coefficient confidence weights.
    S4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetAggregate {
    pub set: String,
    pub alpha: Vec<f64>,
    /// Mesh path relative to the output directory.
    pub mesh: PathBuf,
    pub images: Vec<PathBuf>,
    /// One confidence sum per image, manifest order.
    pub confidence_sums: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sorted_confidence_sums: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selected_image: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub strategy: Strategy,
    /// "zero-init" or the predictor file.
    pub predictor: String,
    pub sets: Vec<SetAggregate>,
}

pub struct AggregateOptions<'a> {
    pub strategy: Strategy,
    pub predictor: Option<&'a Path>,
    /// Scalar predictor for the S1 row of `evaluate`.
    pub scalar_predictor: Option<&'a Path>,
    pub sorted: bool,
    /// Also compare every strategy against the manifest's truth meshes.
    pub evaluate: bool,
    pub force_fit: bool,
}

fn zero_init(s: &Session, sets: &[ImageSet], outputs: usize) -> Result<ConfidencePredictor> {
    let all: Vec<_> = sets.iter().flat_map(|set| set.features()).collect();
    Ok(ConfidencePredictor::new(
        outputs,
        FeatureStats::from_features(&all)?,
        s.cfg.seed,
    )?)
}

/// Aggregates each set of the manifest into `out/aggregate.json` and one OBJ
/// per set; with `evaluate`, also writes `out/strategy_report.json`.
pub fn cmd_aggregate(
    s: &Session,
    manifest_path: &Path,
    opts: &AggregateOptions<'_>,
    out: &Path,
) -> Result<(AggregateReport, Option<StrategyReport>)> {
    let manifest = Manifest::load(manifest_path)?;
    let (_, sets) = load_corpus(s, &manifest, opts.force_fit)?;
    let k = s.model.dims().id;
    let load =
        |p: &Path| ConfidencePredictor::load_json(p).with_context(|| format!("loading predictor {}", p.display()));
    let predictor = match opts.predictor {
        Some(p) => load(p)?,
        None => zero_init(s, &sets, if opts.strategy == Strategy::S1 { 1 } else { k })?,
    };
    let wanted = if opts.strategy == Strategy::S1 { 1 } else { k };
    if opts.strategy != Strategy::Average && predictor.outputs != wanted {
        bail!(face3d::Error::InvalidInput(format!(
            "strategy {:?} needs a predictor with {wanted} outputs, got {}",
            opts.strategy, predictor.outputs
        )));
    }
    create_dir(out)?;
    let mut rows = Vec::with_capacity(sets.len());
    for (set, entry) in sets.iter().zip(&manifest.sets) {
        let alphas = set.alphas();
        let c = predictor.set_confidences(&set.features(), k);
        let sums = confidence_sums(&c);
        let mut selected = None;
        let alpha = match opts.strategy {
            Strategy::Average => shape_average(&alphas)?,
            Strategy::S1 => aggregate_global(&alphas, &c.iter().map(|c| c[0]).collect::<Vec<_>>())?,
            Strategy::S2 => aggregate_global_sums(&alphas, &c)?,
            Strategy::S3 => {
                let (i, a) = select_max_confidence(&alphas, &c)?;
                selected = Some(i);
                a
            }
            Strategy::S4 => aggregate_elementwise(&alphas, &c)?,
        };
        let mesh = PathBuf::from(format!("{}.obj", entry.name));
        write_obj(&identity_mesh(&s.model, &alpha)?, out.join(&mesh))?;
        let sorted = opts.sorted.then(|| {
            let mut v = sums.clone();
            v.sort_by(|a, b| b.total_cmp(a));
            v
        });
        rows.push(SetAggregate {
            set: entry.name.clone(),
            alpha,
            mesh,
            images: entry.images.iter().map(|im| im.image.clone()).collect(),
            confidence_sums: sums,
            sorted_confidence_sums: sorted,
            selected_image: selected,
        });
    }
    let report = AggregateReport {
        strategy: opts.strategy,
        predictor: opts
            .predictor
            .map_or("zero-init".to_string(), |p| p.display().to_string()),
        sets: rows,
    };
    write_json(&out.join("aggregate.json"), &report)?;

    let strategies = if opts.evaluate {
        let vector = if predictor.outputs == k {
            predictor.clone()
        } else {
            zero_init(s, &sets, k)?
        };
        let scalar = opts.scalar_predictor.map(load).transpose()?;
        let eval_sets = sets
            .iter()
            .zip(&manifest.sets)
            .map(|(set, entry)| -> Result<EvalSet> {
                let truth = entry.truth_mesh.as_ref().ok_or_else(|| {
                    anyhow!(face3d::Error::InvalidInput(format!(
                        "set {} has no truth mesh",
                        entry.name
                    )))
                })?;
                Ok(EvalSet {
                    alphas: set.alphas(),
                    features: set.features(),
                    truth: read_obj(manifest.resolve(truth))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let r = s.install(|| evaluate_strategies(&s.model, &eval_sets, &vector, scalar.as_ref(), &s.cfg.eval))?;
        write_json(&out.join("strategy_report.json"), &r)?;
        Some(r)
    } else {
        None
    };
    Ok((report, strategies))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    /// One confidence per identity coefficient (S2, S3, S4).
    Vector,
    /// One confidence per image (S1).
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub kind: PredictorKind,
    pub sets: usize,
    pub images: usize,
    pub epochs: usize,
    /// Corpus loss per epoch; entry 0 is the zero-init predictor.
    pub losses: Vec<f64>,
    pub best: Vec<f64>,
}

/// Trains a confidence predictor on every set of the manifest; writes
/// `out/predictor.json` and `out/training.json`.
pub fn cmd_conf_train(s: &Session, manifest_path: &Path, kind: PredictorKind, out: &Path) -> Result<TrainResult> {
    let manifest = Manifest::load(manifest_path)?;
    let (camera, sets) = load_corpus(s, &manifest, false)?;
    let outputs = match kind {
        PredictorKind::Vector => s.model.dims().id,
        PredictorKind::Scalar => 1,
    };
    let initial = zero_init(s, &sets, outputs)?;
    let ctx = LossContext::new(&s.model, &camera, &s.embedder);
    let r = s
        .install(|| train_confidence(&ctx, &initial, &sets, &s.cfg.train))
        .map_err(|f| {
            anyhow::Error::new(f.error).context(format!("training stopped after {} epochs", f.losses.len()))
        })?;
    create_dir(out)?;
    r.predictor.save_json(out.join("predictor.json"))?;
    let log = TrainingLog {
        kind,
        sets: sets.len(),
        images: sets.iter().map(|set| set.images.len()).sum(),
        epochs: s.cfg.train.epochs,
        losses: r.losses.clone(),
        best: r.best.clone(),
    };
    write_json(&out.join("training.json"), &log)?;
    Ok(r)
}

pub enum SkinSource<'a> {
    Csv(&'a Path),
    /// Generate this many labeled colors.
    Synthetic(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkinReport {
    pub components: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

/// Every `HOLDOUT_STRIDE`-th sample is held out.
pub const HOLDOUT_STRIDE: usize = 5;

/// Trains the two-class skin classifier; writes `out/skin_gmm.json` and
/// `out/skin_report.json`.
pub fn cmd_skin_train(s: &Session, source: SkinSource<'_>, components: usize, out: &Path) -> Result<SkinReport> {
    let samples = match source {
        SkinSource::Csv(p) => load_labeled_csv(p)?,
        SkinSource::Synthetic(n) => synthetic_skin_corpus(n, s.cfg.seed),
    };
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for (i, smp) in samples.into_iter().enumerate() {
        if i % HOLDOUT_STRIDE == HOLDOUT_STRIDE - 1 {
            holdout.push(smp);
        } else {
            train.push(smp);
        }
    }
    if holdout.is_empty() {
        bail!(face3d::Error::InvalidInput(format!(
            "need at least {HOLDOUT_STRIDE} samples for a held-out split"
        )));
    }
    let class = |want: bool| {
        train
            .iter()
            .filter(|(_, l)| *l == want)
            .map(|(c, _)| *c)
            .collect::<Vec<_>>()
    };
    let gmm = SkinGmm::train(&class(true), &class(false), components, s.cfg.seed)?;
    let compiled = gmm.compile()?;
    let report = SkinReport {
        components,
        seed: s.cfg.seed,
        train_samples: train.len(),
        holdout_samples: holdout.len(),
        train_accuracy: accuracy(&compiled, &train),
        holdout_accuracy: accuracy(&compiled, &holdout),
    };
    create_dir(out)?;
    gmm.save_json(out.join("skin_gmm.json"))?;
    write_json(&out.join("skin_report.json"), &report)?;
    Ok(report)
}

/// Scores each prediction against its ground truth (one truth shared by all
/// predictions, or one per prediction) and writes the report to `out`.
pub fn cmd_eval(s: &Session, predictions: &[PathBuf], truths: &[PathBuf], out: &Path) -> Result<EvalReport> {
    if predictions.is_empty() {
        bail!(face3d::Error::InvalidInput("no predicted meshes given".into()));
    }
    if truths.len() != 1 && truths.len() != predictions.len() {
        bail!(face3d::Error::InvalidInput(format!(
            "{} ground-truth meshes for {} predictions; give one or one each",
            truths.len(),
            predictions.len()
        )));
    }
    let errors = s.install(|| {
        predictions
            .par_iter()
            .enumerate()
            .map(|(i, p)| -> Result<SubjectError> {
                let truth = &truths[if truths.len() == 1 { 0 } else { i }];
                let pred = read_obj(p)?;
                let gt = read_obj(truth)?;
                let rmse = evaluate_prediction(&pred, &gt, &s.cfg.eval)
                    .with_context(|| format!("evaluating {} against {}", p.display(), truth.display()))?;
                Ok(SubjectError {
                    name: p.display().to_string(),
                    rmse,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let report = EvalReport::from_errors(errors);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_report(&report, out)?;
    Ok(report)
}

/// Renders a coefficient file to a PNG.
pub fn cmd_render(s: &Session, coefficients: &Path, width: usize, height: usize, out: &Path) -> Result<()> {
    let x = read_coefficients(coefficients, s.model.dims())?;
    let cam = s.cfg.camera(width, height)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    render_image(&s.model, &x, &cam, &s.render_options())?
        .image()
        .save_png(out)?;
    Ok(())
}
