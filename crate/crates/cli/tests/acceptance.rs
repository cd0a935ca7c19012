//! Acceptance suite. One test per criterion; each prints a PASS/FAIL line
//! straight to stderr (bypassing capture) and fails the test on FAIL.
//! The tests take a lock so their time budgets are measured one at a time.

use std::io::Write;
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use face3d::aggregate::{
    aggregate_elementwise, aggregate_global, identity_mesh, shape_average, ROW_AVERAGE, ROW_PER_FRAME, ROW_S4,
};
use face3d::fit::{loss_gradient, FitConfig};
use face3d::geom::{crop_mesh, icp_isotropic, nearest_surface_brute, point_to_plane_rmse, IcpConfig, Mesh, Similarity};
use face3d::image::Image;
use face3d::loss::{evaluate, landmark_loss, FitTarget, LossContext, LossWeights, ProjectionEmbedder};
use face3d::model::{
    synthesize_toy_model, CoefficientVector, ModelDims, MorphableModel, Vec3, EMPHASIZED_LANDMARK_WEIGHT,
    INNER_MOUTH_LANDMARKS, NOSE_LANDMARKS, SH_COEFFS,
};
use face3d::raster::{rasterize, rasterize_all_pairs};
use face3d::render::{forward, project_landmarks, RenderOptions};
use face3d::scene::{Camera, Pose, Projected, SH_C0};
use face3d::skin::{attention_value, fit_gmm, synthetic_skin_corpus};
use face3d::synth::{PoseSpec, SynthConfig};
use face3d_cli::commands::{
    cmd_aggregate, cmd_conf_train, cmd_fit, cmd_skin_train, cmd_synth, AggregateOptions, PredictorKind, Session,
    SkinSource, Strategy,
};
use face3d_cli::config::RunConfig;
use face3d_cli::io::{read_coefficients, read_landmarks, Manifest};
use face3d_cli::FRONTAL_JITTER_DEG;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

static SERIAL: Mutex<()> = Mutex::new(());

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn criterion(n: u32, name: &str, budget_s: u64, body: impl FnOnce() -> Outcome) {
    let _serial = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let result = std::panic::catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    let result = result.and_then(|detail| {
        if start.elapsed() <= Duration::from_secs(budget_s) {
            Ok(detail)
        } else {
            Err(format!("{detail}; over the {budget_s} s budget"))
        }
    });
    let line = match &result {
        Ok(d) => format!("criterion {n} PASS  {name}: {d} [{secs:.1} s]"),
        Err(e) => format!("criterion {n} FAIL  {name}: {e} [{secs:.1} s]"),
    };
    let _ = writeln!(std::io::stderr().lock(), "{line}");
    if let Err(e) = result {
        panic!("criterion {n} failed: {e}");
    }
}

// ---- criterion 1 ----

fn random_x(model: &MorphableModel, rng: &mut ChaCha8Rng) -> CoefficientVector {
    let n = Normal::new(0.0, 0.6).unwrap();
    let mut x = CoefficientVector::zeros(model.dims());
    x.alpha.iter_mut().for_each(|a| *a = n.sample(rng));
    x.beta.iter_mut().for_each(|a| *a = n.sample(rng));
    x.delta.iter_mut().for_each(|a| *a = n.sample(rng));
    x.gamma[0] = rng.random_range(0.7..0.95) / SH_C0;
    for g in &mut x.gamma[1..] {
        *g = rng.random_range(-0.3..0.3);
    }
    x.pose = Pose::new(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.1..0.1),
        [
            rng.random_range(-15.0..15.0),
            rng.random_range(-15.0..15.0),
            rng.random_range(900.0..1100.0),
        ],
    );
    x
}

struct GradStats {
    checked: usize,
    max_rel: f64,
}

/// Analytic vs finite-difference gradient on random toy scenes (V=100,
/// 64x64). `richardson` extrapolates two central differences. Coordinates
/// whose perturbation changes pixel coverage are skipped.
fn gradient_check(
    weights: LossWeights,
    h: f64,
    richardson: bool,
    tol: f64,
    seeds: std::ops::Range<u64>,
    per_scene: usize,
) -> Result<GradStats, String> {
    let embedder = ProjectionEmbedder::default();
    let mut stats = GradStats {
        checked: 0,
        max_rel: 0.0,
    };
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = synthesize_toy_model(100, 8, 6, 8, seed).unwrap();
        let camera = Camera::default_for(64, 64);
        let truth = random_x(&model, &mut rng);
        let fwd = forward(
            &model,
            &truth,
            &camera,
            &RenderOptions {
                background: [0.2, 0.3, 0.25],
            },
        )
        .unwrap();
        let mut img = fwd.buffer.image();
        for p in &mut img.pixels {
            for c in p.iter_mut() {
                *c = (*c + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
            }
        }
        let lms = fwd
            .landmarks(&model)
            .points
            .iter()
            .map(|p| [p[0] + rng.random_range(-2.0..2.0), p[1] + rng.random_range(-2.0..2.0)])
            .collect();
        let attention = (0..img.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let target = FitTarget::new(Image::clone(&img), lms, attention, &embedder).unwrap();
        let x = random_x(&model, &mut rng);

        let ctx = LossContext::new(&model, &camera, &embedder).with_weights(weights);
        let (_, grad) = loss_gradient(&ctx, &target, &x).map_err(|e| e.to_string())?;
        let base = forward(&model, &x, &camera, &ctx.render).unwrap().buffer;
        let flat = x.flatten();
        let mut done = 0;
        for _ in 0..4 * per_scene {
            if done == per_scene {
                break;
            }
            let k = rng.random_range(0..flat.len());
            let eval = |delta: f64| {
                let mut f = flat.clone();
                f[k] += delta;
                let x = CoefficientVector::unflatten(&f, model.dims()).unwrap();
                let buf = forward(&model, &x, &camera, &ctx.render).unwrap().buffer;
                let same = buf
                    .fragment
                    .iter()
                    .zip(&base.fragment)
                    .all(|(a, b)| a.map(|f| f.triangle) == b.map(|f| f.triangle));
                (evaluate(&ctx, &target, &x, false).unwrap().0.total, same)
            };
            let central = |h: f64| {
                let (lp, sp) = eval(h);
                let (lm, sm) = eval(-h);
                (sp && sm).then(|| (lp - lm) / (2.0 * h))
            };
            let estimate = if richardson {
                central(h).zip(central(h / 2.0)).map(|(a, b)| (4.0 * b - a) / 3.0)
            } else {
                central(h)
            };
            let Some(fd) = estimate else { continue };
            let g = grad[k];
            if !(g.abs() < 1e-8 && fd.abs() < 1e-8) {
                let rel = (g - fd).abs() / g.abs().max(fd.abs());
                stats.max_rel = stats.max_rel.max(rel);
                check!(
                    rel <= tol,
                    "seed {seed} coordinate {k}: analytic {g:e} vs fd {fd:e} (rel {rel:.2e} > {tol:e})"
                );
            }
            stats.checked += 1;
            done += 1;
        }
    }
    Ok(stats)
}

#[test]
fn criterion_1_gradient_suite() {
    criterion(1, "gradient suite", 60, || {
        let only = |f: &dyn Fn(&mut LossWeights)| {
            let mut w = LossWeights::zero();
            f(&mut w);
            w
        };
        let runs = [
            ("hybrid", LossWeights::default(), 1e-5, false, 1e-4, 0..8, 30),
            ("photo", only(&|w| w.photo = 1.0), 1e-5, false, 1e-4, 10..12, 30),
            ("perceptual", only(&|w| w.per = 1.0), 1e-5, false, 1e-4, 20..22, 30),
            ("landmark", only(&|w| w.lan = 1.0), 1e-3, true, 1e-8, 30..32, 30),
            ("coef reg", only(&|w| w.coef = 1.0), 1e-2, true, 1e-8, 40..42, 30),
            ("tex reg", only(&|w| w.tex = 1.0), 1e-3, true, 1e-8, 42..44, 30),
        ];
        let mut parts = Vec::new();
        let mut total = 0;
        for (name, w, h, rich, tol, seeds, per) in runs {
            let s = gradient_check(w, h, rich, tol, seeds, per).map_err(|e| format!("{name}: {e}"))?;
            check!(s.checked >= 50, "{name}: only {} coordinates checked", s.checked);
            total += s.checked;
            parts.push(format!("{name} {} max rel {:.1e}", s.checked, s.max_rel));
        }
        check!(total >= 200, "only {total} coordinates checked");
        Ok(format!("{total} coordinates; {}", parts.join(", ")))
    });
}

// ---- criterion 2 ----

fn random_raster_scene(seed: u64) -> (Vec<Projected>, Vec<[usize; 3]>, Vec<Vec3>, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (rng.random_range(8..=64), rng.random_range(8..=64));
    let nv = rng.random_range(3..40);
    let snap = rng.random_bool(0.5);
    let vertices: Vec<Projected> = (0..nv)
        .map(|_| {
            let mut u = rng.random_range(-10.0..w as f64 + 10.0);
            let mut v = rng.random_range(-10.0..h as f64 + 10.0);
            if snap {
                u = (u * 2.0).round() / 2.0;
                v = (v * 2.0).round() / 2.0;
            }
            let depth = if rng.random_bool(0.3) {
                50.0
            } else {
                rng.random_range(1.0..100.0)
            };
            Projected {
                u,
                v,
                depth,
                in_front: !rng.random_bool(0.05),
            }
        })
        .collect();
    let mut triangles = Vec::new();
    for _ in 0..rng.random_range(1..60) {
        let t = [
            rng.random_range(0..nv),
            rng.random_range(0..nv),
            rng.random_range(0..nv),
        ];
        triangles.push(t);
        if rng.random_bool(0.3) {
            triangles.push([t[1], t[0], rng.random_range(0..nv)]);
            triangles.push(t);
        }
    }
    let colors = (0..nv)
        .map(|_| {
            Vec3::new(
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            )
        })
        .collect();
    (vertices, triangles, colors, w, h)
}

#[test]
fn criterion_2_rasterizer_oracle() {
    criterion(2, "rasterizer oracle", 30, || {
        let mut pixels = 0;
        // 80 random triangle soups and 20 rendered toy faces
        for seed in 0..80 {
            let (v, t, c, w, h) = random_raster_scene(seed);
            let fast = rasterize(&v, &t, &c, w, h, [0.1, 0.2, 0.3]);
            let slow = rasterize_all_pairs(&v, &t, &c, w, h, [0.1, 0.2, 0.3]);
            check!(fast == slow, "triangle soup {seed} differs from the all-pairs oracle");
            pixels += fast.covered_pixels();
        }
        let model = synthesize_toy_model(300, 6, 4, 6, 2).unwrap();
        let camera = Camera::default_for(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..20 {
            let x = random_x(&model, &mut rng);
            let f = forward(&model, &x, &camera, &RenderOptions::default()).unwrap();
            let slow = rasterize_all_pairs(&f.projected, &model.triangles, &f.colors, 64, 64, [0.0; 3]);
            check!(f.buffer == slow, "toy face {i} differs from the all-pairs oracle");
            pixels += slow.covered_pixels();
        }
        Ok(format!(
            "100 scenes identical in fragment, color and depth ({pixels} covered pixels)"
        ))
    });
}

// ---- criterion 3 ----

fn mean_vertex_error(model: &MorphableModel, a: &[f64], b: &[f64]) -> f64 {
    let p = model.neutral_shape(a).unwrap();
    let q = model.neutral_shape(b).unwrap();
    p.iter().zip(&q).map(|(u, v)| (u - v).norm()).sum::<f64>() / p.len() as f64
}

#[test]
fn criterion_3_synthetic_recovery() {
    criterion(3, "single-image recovery", 600, || {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig {
            seed: 2024,
            ..RunConfig::default()
        };
        cfg.synth.poses = vec![PoseSpec {
            pitch_deg: 0.0,
            yaw_deg: 0.0,
        }];
        cfg.synth.angle_jitter_deg = FRONTAL_JITTER_DEG;
        let s = Session::new(cfg).map_err(|e| e.to_string())?;
        let corpus = dir.path().join("corpus");
        let manifest = cmd_synth(&s, 20, &corpus).map_err(|e| format!("{e:#}"))?;
        let mut ok = 0;
        let (mut errs, mut lans) = (Vec::new(), Vec::new());
        for set in &manifest.sets {
            let im = &set.images[0];
            let out = dir.path().join("fits").join(&set.name);
            let r = cmd_fit(&s, &manifest.resolve(&im.image), &manifest.resolve(&im.landmarks), &out)
                .map_err(|e| format!("{e:#}"))?;
            let truth = read_coefficients(
                &manifest.resolve(im.truth_coefficients.as_ref().unwrap()),
                s.model.dims(),
            )
            .map_err(|e| e.to_string())?;
            let fitted =
                read_coefficients(&out.join("coefficients.json"), s.model.dims()).map_err(|e| e.to_string())?;
            check!(fitted == r.x, "coefficient file does not match the fit");
            let err = mean_vertex_error(&s.model, &truth.alpha, &fitted.alpha);
            let detected = read_landmarks(&manifest.resolve(&im.landmarks), s.model.landmarks.len()).unwrap();
            let cam = s.cfg.camera(224, 224).unwrap();
            let projected = project_landmarks(&s.model, &fitted, &cam).unwrap();
            let lan = landmark_loss(&detected, &projected.points, &projected.weights).unwrap();
            if err <= 1.0 && lan <= 1.0 {
                ok += 1;
            }
            errs.push(err);
            lans.push(lan);
        }
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        let worst_lan = lans.iter().cloned().fold(0.0, f64::max);
        let detail = format!(
            "{ok}/20 subjects with vertex error <= 1 mm and landmark loss <= 1 px^2 (mean error {mean:.3} mm, worst {worst:.3} mm, worst landmark loss {worst_lan:.3})"
        );
        check!(ok >= 18, "{detail}");
        Ok(detail)
    });
}

// ---- criterion 4 ----

fn opts(strategy: Strategy, predictor: Option<&Path>, evaluate: bool) -> AggregateOptions<'_> {
    AggregateOptions {
        strategy,
        predictor,
        scalar_predictor: None,
        sorted: false,
        evaluate,
        force_fit: false,
    }
}

#[test]
fn criterion_4_aggregation_ordering() {
    criterion(4, "aggregation ordering", 1200, || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            synth: SynthConfig {
                size: 96,
                occlusion: 0.3,
                landmark_jitter: 1.0,
                ..SynthConfig::default()
            },
            fit: FitConfig {
                iterations: 300,
                ..FitConfig::default()
            },
            ..RunConfig::default()
        };
        let e = |e: anyhow::Error| format!("{e:#}");
        let train = Session::new(RunConfig {
            seed: 11,
            ..cfg.clone()
        })
        .map_err(e)?;
        let test = Session::new(RunConfig { seed: 12, ..cfg }).map_err(e)?;
        cmd_synth(&train, 14, &dir.path().join("train")).map_err(e)?;
        cmd_synth(&test, 6, &dir.path().join("test")).map_err(e)?;
        let train_manifest = dir.path().join("train/manifest.json");
        let test_manifest = dir.path().join("test/manifest.json");
        let degraded = Manifest::load(&test_manifest)
            .unwrap()
            .sets
            .iter()
            .flat_map(|s| &s.images)
            .filter(|im| im.occluder.is_some())
            .count();
        check!(degraded > 0, "no degraded frames injected");

        let trained =
            cmd_conf_train(&train, &train_manifest, PredictorKind::Vector, &dir.path().join("conf")).map_err(e)?;
        let predictor = dir.path().join("conf/predictor.json");
        let (_, report) = cmd_aggregate(
            &test,
            &test_manifest,
            &opts(Strategy::S4, Some(&predictor), true),
            &dir.path().join("trained"),
        )
        .map_err(e)?;
        let report = report.expect("evaluation requested");
        let (zero, _) = cmd_aggregate(
            &test,
            &test_manifest,
            &opts(Strategy::S4, None, false),
            &dir.path().join("zero"),
        )
        .map_err(e)?;
        let (avg, _) = cmd_aggregate(
            &test,
            &test_manifest,
            &opts(Strategy::Average, None, false),
            &dir.path().join("avg"),
        )
        .map_err(e)?;

        let row = |name: &str| report.row(name).map(|r| r.mean).unwrap();
        let (frame, average, s4) = (row(ROW_PER_FRAME), row(ROW_AVERAGE), row(ROW_S4));
        let detail = format!(
            "held-out (6 subjects, {degraded} degraded frames): per-frame {frame:.3} mm, averaging {average:.3} mm, trained S4 {s4:.3} mm; training loss {:.5} -> {:.5}",
            trained.losses[0],
            trained.best.last().unwrap()
        );
        check!(average <= frame, "(a) averaging worse than per-frame: {detail}");
        check!(s4 < average, "(b) trained S4 not below averaging: {detail}");
        for (z, a) in zero.sets.iter().zip(&avg.sets) {
            check!(
                z.alpha == a.alpha,
                "(c) zero-init S4 differs from averaging on {}",
                z.set
            );
        }
        Ok(format!("{detail}; zero-init S4 == averaging on all sets"))
    });
}

// ---- criterion 5 ----

#[test]
fn criterion_5_aggregation_algebra() {
    criterion(5, "aggregation algebra", 5, || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cases = 20_000;
        for case in 0..cases {
            let m = rng.random_range(1..=8);
            let k = rng.random_range(1..=12);
            let alphas: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..k).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let conf: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..k).map(|_| rng.random_range(1e-6..1.0)).collect())
                .collect();
            let agg = aggregate_elementwise(&alphas, &conf).map_err(|e| e.to_string())?;
            for j in 0..k {
                let lo = alphas.iter().map(|a| a[j]).fold(f64::INFINITY, f64::min);
                let hi = alphas.iter().map(|a| a[j]).fold(f64::NEG_INFINITY, f64::max);
                check!(
                    lo <= agg[j] && agg[j] <= hi,
                    "case {case}: {} outside [{lo}, {hi}]",
                    agg[j]
                );
            }
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng);
            let pa: Vec<_> = order.iter().map(|&i| alphas[i].clone()).collect();
            let pc: Vec<_> = order.iter().map(|&i| conf[i].clone()).collect();
            check!(
                aggregate_elementwise(&pa, &pc).unwrap() == agg,
                "case {case}: not permutation invariant"
            );
            let scalars: Vec<f64> = conf.iter().map(|c| c[0]).collect();
            let ps: Vec<f64> = order.iter().map(|&i| scalars[i]).collect();
            check!(
                aggregate_global(&pa, &ps).unwrap() == aggregate_global(&alphas, &scalars).unwrap(),
                "case {case}: global not permutation invariant"
            );
            if m == 1 {
                check!(agg == alphas[0], "case {case}: M=1 is not the identity");
            }
            let u = rng.random_range(1e-6..1.0);
            let uniform = vec![vec![u; k]; m];
            check!(
                aggregate_elementwise(&alphas, &uniform).unwrap() == shape_average(&alphas).unwrap(),
                "case {case}: uniform confidences do not reduce to the mean"
            );
        }
        Ok(format!(
            "{cases} random cases: convex bounds, permutation invariance, M=1 identity, uniform reduction"
        ))
    });
}

// ---- criterion 6 ----

fn triangle_normal(m: &Mesh, t: usize) -> Vec3 {
    let [a, b, c] = m.triangles[t].map(|i| m.vertices[i]);
    (b - a).cross(&(c - a)).normalize()
}

#[test]
fn criterion_6_icp_and_metric_oracles() {
    criterion(6, "ICP and metric oracles", 30, || {
        let model = synthesize_toy_model(500, 6, 4, 6, 9).unwrap();
        let target = identity_mesh(&model, &[0.3, -0.5, 0.2, 0.0, 0.1, -0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst_icp: f64 = 0.0;
        for _ in 0..3 {
            let sim = Similarity {
                scale: 1.3,
                rotation: Pose::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    [0.0; 3],
                )
                .rotation(),
                translation: Vec3::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                ),
            };
            let source: Vec<Vec3> = target.vertices.iter().map(|p| sim.apply(p)).collect();
            let r = icp_isotropic(&source, &target, &IcpConfig::default()).map_err(|e| e.to_string())?;
            let rmse = (source
                .iter()
                .zip(&target.vertices)
                .map(|(s, t)| (r.transform.apply(s) - t).norm_squared())
                .sum::<f64>()
                / source.len() as f64)
                .sqrt();
            worst_icp = worst_icp.max(rmse);
        }
        check!(worst_icp <= 1e-6, "similarity recovery rmse {worst_icp:e} mm");

        // > 10k triangles, so the BVH path is the one under test
        let big = synthesize_toy_model(6000, 2, 2, 2, 4).unwrap();
        let mesh = identity_mesh(&big, &[0.0, 0.0]).unwrap();
        check!(mesh.triangles.len() > 10_000, "test mesh too small");
        let points: Vec<Vec3> = (0..1000)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-90.0..90.0),
                    rng.random_range(-120.0..120.0),
                    rng.random_range(-40.0..140.0),
                )
            })
            .collect();
        let fast = point_to_plane_rmse(&points, &mesh).map_err(|e| e.to_string())?;
        let oracle = (points
            .iter()
            .map(|p| {
                let hit = nearest_surface_brute(&mesh, p).unwrap();
                (p - hit.point).dot(&triangle_normal(&mesh, hit.triangle)).powi(2)
            })
            .sum::<f64>()
            / points.len() as f64)
            .sqrt();
        check!(
            (fast - oracle).abs() <= 1e-12,
            "point-to-plane {fast} vs oracle {oracle}"
        );

        let center = mesh.nose_tip_position().unwrap();
        let crop = crop_mesh(&mesh, &center, 95.0).map_err(|e| e.to_string())?;
        let keep: Vec<usize> = (0..mesh.vertices.len())
            .filter(|&i| (mesh.vertices[i] - center).norm() <= 95.0)
            .collect();
        let expected_vertices: Vec<Vec3> = keep.iter().map(|&i| mesh.vertices[i]).collect();
        let mut remap = vec![usize::MAX; mesh.vertices.len()];
        keep.iter().enumerate().for_each(|(new, &old)| remap[old] = new);
        let expected_triangles: Vec<[usize; 3]> = mesh
            .triangles
            .iter()
            .filter(|t| t.iter().all(|&i| remap[i] != usize::MAX))
            .map(|t| t.map(|i| remap[i]))
            .collect();
        check!(crop.vertices == expected_vertices, "crop keeps a different vertex set");
        check!(
            crop.triangles == expected_triangles,
            "crop keeps a different triangle set"
        );
        Ok(format!(
            "ICP rmse {worst_icp:.1e} mm; point-to-plane {fast:.6} mm == oracle on 1000 points ({} triangles); 95 mm crop keeps {}/{} vertices as the brute-force filter",
            mesh.triangles.len(),
            crop.vertices.len(),
            mesh.vertices.len()
        ))
    });
}

// ---- criterion 7 ----

#[test]
fn criterion_7_skin_attention() {
    criterion(7, "skin attention", 30, || {
        check!(attention_value(0.9) == 1.0, "A(0.9) = {}", attention_value(0.9));
        check!(attention_value(0.3) == 0.3, "A(0.3) = {}", attention_value(0.3));
        check!(attention_value(0.5) == 0.5, "A(0.5) = {}", attention_value(0.5));
        let dir = tempfile::tempdir().unwrap();
        let s = Session::new(RunConfig {
            seed: 7,
            ..RunConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let report = cmd_skin_train(&s, SkinSource::Synthetic(6000), 4, dir.path()).map_err(|e| format!("{e:#}"))?;
        check!(
            report.holdout_accuracy >= 0.95,
            "held-out accuracy {:.4}",
            report.holdout_accuracy
        );
        let corpus = synthetic_skin_corpus(4000, 3);
        let skin: Vec<_> = corpus.iter().filter(|(_, l)| *l).map(|(c, _)| *c).collect();
        let mut steps = 0;
        for seed in 0..4 {
            let fit = fit_gmm(&skin, 4, seed).map_err(|e| e.to_string())?;
            for w in fit.log_likelihood.windows(2) {
                check!(
                    w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0),
                    "seed {seed}: EM log-likelihood fell {} -> {}",
                    w[0],
                    w[1]
                );
            }
            steps += fit.log_likelihood.len();
        }
        Ok(format!(
            "case rule exact; held-out accuracy {:.4} on {} samples; EM log-likelihood monotone over {steps} iterations",
            report.holdout_accuracy, report.holdout_samples
        ))
    });
}

// ---- criterion 8 ----

fn run_cli(root: &Path, args: &[&str]) -> Result<(), String> {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_face3d"))
        .args(args)
        .current_dir(root)
        .env_remove("FACE3D_CONFIG")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "face3d {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn list_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn criterion_8_determinism() {
    criterion(8, "determinism", 600, || {
        let poses =
            "synth.poses=[{pitch_deg=0.0,yaw_deg=0.0},{pitch_deg=0.0,yaw_deg=40.0},{pitch_deg=20.0,yaw_deg=-40.0}]";
        let script: Vec<Vec<&str>> = vec![
            vec![
                "synth",
                "--count",
                "2",
                "--size",
                "48",
                "--occlusion",
                "0.5",
                "--set",
                poses,
                "--out",
                "corpus",
            ],
            vec![
                "fit",
                "--image",
                "corpus/subject_000/view_00.png",
                "--landmarks",
                "corpus/subject_000/view_00.lm.txt",
                "--iterations",
                "60",
                "--out",
                "fit",
            ],
            vec!["fit", "--manifest", "corpus/manifest.json", "--iterations", "60"],
            vec![
                "conf-train",
                "--manifest",
                "corpus/manifest.json",
                "--epochs",
                "3",
                "--out",
                "conf",
            ],
            vec![
                "conf-train",
                "--manifest",
                "corpus/manifest.json",
                "--epochs",
                "3",
                "--kind",
                "scalar",
                "--out",
                "conf1",
            ],
            vec![
                "aggregate",
                "--manifest",
                "corpus/manifest.json",
                "--strategy",
                "s4",
                "--predictor",
                "conf/predictor.json",
                "--sorted",
                "--evaluate",
                "--scalar-predictor",
                "conf1/predictor.json",
                "--out",
                "agg",
            ],
            vec![
                "aggregate",
                "--manifest",
                "corpus/manifest.json",
                "--strategy",
                "s3",
                "--out",
                "agg3",
            ],
            vec![
                "skin-train",
                "--synthetic",
                "1000",
                "--components",
                "2",
                "--out",
                "skin",
            ],
            vec![
                "eval",
                "--predicted",
                "agg/subject_000.obj",
                "agg/subject_001.obj",
                "--truth",
                "corpus/subject_000/truth.obj",
                "corpus/subject_001/truth.obj",
                "--out",
                "eval.json",
            ],
            vec![
                "render",
                "--coefficients",
                "fit/coefficients.json",
                "--width",
                "64",
                "--height",
                "48",
                "--out",
                "render.png",
            ],
        ];
        let roots = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for root in &roots {
            for args in &script {
                let mut full = vec!["--seed", "5"];
                full.extend(args);
                run_cli(root.path(), &full)?;
            }
        }
        let files = list_files(roots[0].path());
        check!(
            files == list_files(roots[1].path()),
            "runs produced different file lists"
        );
        for f in &files {
            let a = std::fs::read(roots[0].path().join(f)).unwrap();
            let b = std::fs::read(roots[1].path().join(f)).unwrap();
            check!(a == b, "{} differs between runs", f.display());
        }
        Ok(format!(
            "{} commands run twice, {} output files byte-identical",
            script.len(),
            files.len()
        ))
    });
}

// ---- criterion 9 ----

#[test]
fn criterion_9_default_constants() {
    criterion(9, "default constants", 10, || {
        let w = LossWeights::default();
        check!(
            (w.photo, w.lan, w.per, w.coef, w.tex) == (1.9, 1.6e-3, 0.2, 3e-4, 5.0),
            "loss weights {w:?}"
        );
        check!(
            (w.reg_alpha, w.reg_beta, w.reg_delta) == (1.0, 0.8, 1.7e-3),
            "regularizer weights {w:?}"
        );
        let model = synthesize_toy_model(300, 4, 4, 4, 1).unwrap();
        let lw = model.landmark_weights();
        for i in 0..lw.len() {
            let emphasized = NOSE_LANDMARKS.contains(&i) || INNER_MOUTH_LANDMARKS.contains(&i);
            let want = if emphasized { EMPHASIZED_LANDMARK_WEIGHT } else { 1.0 };
            check!(lw[i] == want, "landmark {i} weight {}", lw[i]);
        }
        check!(
            EMPHASIZED_LANDMARK_WEIGHT == 20.0,
            "emphasized weight {EMPHASIZED_LANDMARK_WEIGHT}"
        );
        let x = CoefficientVector::zeros(ModelDims::PAPER);
        check!(x.gamma.len() == 9 && SH_COEFFS == 9, "gamma length {}", x.gamma.len());
        check!(
            ModelDims::PAPER.coefficient_len() == 239 && x.len() == 239,
            "coefficient length {}",
            x.len()
        );
        let cfg = RunConfig::default();
        check!(cfg.fit.weights == w, "run config does not default to the reference weights");
        Ok("weights (1.9, 1.6e-3, 0.2, 3e-4, 5) and (1.0, 0.8, 1.7e-3); nose/inner-mouth landmarks x20; gamma 9; x 239".into())
    });
}
