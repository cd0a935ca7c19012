//! End-to-end tests of the `face3d` binary on small synthetic corpora.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use face3d::geom::{write_obj, Mesh};
use face3d::model::Vec3;
use face3d::skin::{synthetic_skin_corpus, write_labeled_csv};
use face3d_cli::commands::{AggregateReport, SkinReport};
use face3d_cli::io::{read_json, Manifest};
use serde_json::Value;

const POSES: &str =
    "synth.poses=[{pitch_deg=0.0,yaw_deg=0.0},{pitch_deg=0.0,yaw_deg=40.0},{pitch_deg=20.0,yaw_deg=-40.0}]";

fn face3d(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_face3d"))
        .args(args)
        .current_dir(dir)
        .env_remove("FACE3D_CONFIG")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = face3d(dir, args);
    assert!(
        out.status.success(),
        "face3d {} exited {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Two subjects, three 48 px views each, fitted with 60 iterations.
fn small_corpus(dir: &Path) {
    ok(
        dir,
        &[
            "--seed", "3", "synth", "--count", "2", "--size", "48", "--set", POSES, "--out", "corpus",
        ],
    );
    ok(
        dir,
        &["fit", "--manifest", "corpus/manifest.json", "--iterations", "60"],
    );
}

fn json(path: impl AsRef<Path>) -> Value {
    read_json(path.as_ref()).unwrap()
}

#[test]
fn missing_landmark_file_is_bad_input_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        dir.path(),
        &[
            "synth", "--count", "1", "--size", "48", "--poses", "frontal", "--out", "c",
        ],
    );
    let out = face3d(
        dir.path(),
        &[
            "fit",
            "--image",
            "c/subject_000/view_00.png",
            "--landmarks",
            "c/nowhere.lm.txt",
            "--out",
            "f",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("c/nowhere.lm.txt"), "{err}");
}

#[test]
fn exit_codes_separate_bad_input_from_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(face3d(d, &["frobnicate"]).status.code(), Some(2));
    assert_eq!(face3d(d, &["--set", "no_such_key=1", "synth"]).status.code(), Some(2));
    assert_eq!(face3d(d, &["--config", "absent.toml", "synth"]).status.code(), Some(2));
    assert_eq!(face3d(d, &["--help"]).status.code(), Some(0));

    ok(
        d,
        &[
            "synth", "--count", "1", "--size", "48", "--poses", "frontal", "--out", "c",
        ],
    );
    let args = [
        "fit",
        "--image",
        "c/subject_000/view_00.png",
        "--landmarks",
        "c/subject_000/view_00.lm.txt",
        "--iterations",
        "20",
        "--set",
        "fit.divergence_threshold=1e-12",
        "--out",
        "f",
    ];
    let out = face3d(d, &args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    // the partial trace of the failed fit is kept
    let trace = json(d.join("f/trace.json"));
    assert_eq!(trace["status"], "failed");
    assert!(!d.join("f/coefficients.json").exists());
}

#[test]
fn config_file_from_environment_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.toml"),
        "seed = 9\noutput = \"from_config\"\n[synth]\nsize = 40\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_face3d"))
            .args(args)
            .current_dir(d)
            .env("FACE3D_CONFIG", d.join("run.toml"))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["synth", "--poses", "frontal"]);
    assert_eq!(
        image::image_dimensions(d.join("from_config/subject_000/view_00.png")).unwrap(),
        (40, 40)
    );
    run(&["synth", "--poses", "frontal", "--size", "32", "--out", "flagged"]);
    assert_eq!(
        image::image_dimensions(d.join("flagged/subject_000/view_00.png")).unwrap(),
        (32, 32)
    );
    // the config seed is used unless overridden
    run(&["synth", "--poses", "frontal", "--out", "same"]);
    run(&["synth", "--poses", "frontal", "--seed", "10", "--out", "other"]);
    let lm = |p: &str| std::fs::read(d.join(p).join("subject_000/view_00.lm.txt")).unwrap();
    assert_eq!(lm("from_config"), lm("same"));
    assert_ne!(lm("from_config"), lm("other"));
}

#[test]
fn synth_default_grid_and_occluders() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "synth",
            "--count",
            "1",
            "--size",
            "32",
            "--occlusion",
            "1",
            "--out",
            "c",
        ],
    );
    let m = Manifest::load(&d.join("c/manifest.json")).unwrap();
    let set = &m.sets[0];
    assert_eq!(set.images.len(), 20);
    let yaws: Vec<f64> = set.images.iter().map(|i| i.yaw_deg.unwrap()).collect();
    assert!(yaws.contains(&-80.0) && yaws.contains(&80.0));
    assert!(set.images.iter().all(|i| i.occluder.is_some()));
    for im in &set.images {
        assert!(m.resolve(&im.image).exists() && m.resolve(&im.landmarks).exists());
        assert!(!m.resolve(&im.coefficients).exists());
    }
    assert!(m.resolve(set.truth_mesh.as_ref().unwrap()).exists());
}

#[test]
fn fit_writes_all_artifacts_and_caches_manifest_fits() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    let again = ok(d, &["fit", "--manifest", "corpus/manifest.json", "--iterations", "60"]);
    assert!(again.contains("fitted 0 images, 6 cached"), "{again}");

    ok(
        d,
        &[
            "--seed",
            "3",
            "fit",
            "--image",
            "corpus/subject_000/view_00.png",
            "--landmarks",
            "corpus/subject_000/view_00.lm.txt",
            "--iterations",
            "60",
            "--out",
            "single",
        ],
    );
    for f in ["coefficients.json", "mesh.obj", "render.png", "trace.json"] {
        assert!(d.join("single").join(f).exists(), "{f}");
    }
    // the single fit and the manifest fit use the same config and seed
    assert_eq!(
        std::fs::read(d.join("single/coefficients.json")).unwrap(),
        std::fs::read(d.join("corpus/subject_000/view_00.coef.json")).unwrap()
    );
    let trace = json(d.join("single/trace.json"));
    assert_eq!(trace["status"], "ok");
    // the start point plus one entry per step
    assert_eq!(trace["trace"]["entries"].as_array().unwrap().len(), 61);

    ok(
        d,
        &[
            "render",
            "--coefficients",
            "single/coefficients.json",
            "--width",
            "64",
            "--height",
            "32",
            "--out",
            "r.png",
        ],
    );
    assert_eq!(image::image_dimensions(d.join("r.png")).unwrap(), (64, 32));
}

#[test]
fn parallel_fits_match_sequential_fits() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &["synth", "--count", "1", "--size", "40", "--set", POSES, "--out", "a"],
    );
    ok(
        d,
        &["synth", "--count", "1", "--size", "40", "--set", POSES, "--out", "b"],
    );
    ok(
        d,
        &[
            "--jobs",
            "1",
            "fit",
            "--manifest",
            "a/manifest.json",
            "--iterations",
            "30",
        ],
    );
    ok(
        d,
        &[
            "--jobs",
            "3",
            "fit",
            "--manifest",
            "b/manifest.json",
            "--iterations",
            "30",
        ],
    );
    for v in 0..3 {
        let p = format!("subject_000/view_{v:02}.coef.json");
        assert_eq!(
            std::fs::read(d.join("a").join(&p)).unwrap(),
            std::fs::read(d.join("b").join(&p)).unwrap()
        );
    }
}

#[test]
fn aggregation_reports_and_reductions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    ok(
        d,
        &[
            "aggregate",
            "--manifest",
            "corpus/manifest.json",
            "--strategy",
            "average",
            "--out",
            "avg",
        ],
    );
    ok(
        d,
        &[
            "aggregate",
            "--manifest",
            "corpus/manifest.json",
            "--strategy",
            "s4",
            "--sorted",
            "--out",
            "s4",
        ],
    );
    let avg: AggregateReport = read_json(&d.join("avg/aggregate.json")).unwrap();
    let s4: AggregateReport = read_json(&d.join("s4/aggregate.json")).unwrap();
    assert_eq!(s4.predictor, "zero-init");
    for (a, b) in avg.sets.iter().zip(&s4.sets) {
        assert_eq!(a.alpha, b.alpha, "zero-init S4 must equal averaging");
        assert_eq!(b.confidence_sums.len(), 3);
        let sorted = b.sorted_confidence_sums.as_ref().unwrap();
        assert!(sorted.windows(2).all(|w| w[0] >= w[1]));
        let mut expect = b.confidence_sums.clone();
        expect.sort_by(|x, y| y.total_cmp(x));
        assert_eq!(sorted, &expect);
        assert!(d.join("s4").join(&b.mesh).exists());
    }
    assert!(avg.sets[0].sorted_confidence_sums.is_none());

    // a one-image set aggregates to its own fit
    let mut m = Manifest::load(&d.join("corpus/manifest.json")).unwrap();
    m.sets.truncate(1);
    m.sets[0].images.truncate(1);
    m.save(&d.join("corpus/single.json")).unwrap();
    for strategy in ["average", "s2", "s3", "s4"] {
        let out = format!("one_{strategy}");
        ok(
            d,
            &[
                "aggregate",
                "--manifest",
                "corpus/single.json",
                "--strategy",
                strategy,
                "--out",
                &out,
            ],
        );
        let r: AggregateReport = read_json(&d.join(&out).join("aggregate.json")).unwrap();
        let fit = json(d.join("corpus/subject_000/view_00.coef.json"));
        let alpha: Vec<f64> = serde_json::from_value(fit["alpha"].clone()).unwrap();
        assert_eq!(r.sets[0].alpha, alpha, "{strategy}");
    }

    // a scalar predictor cannot drive element-wise aggregation
    ok(
        d,
        &[
            "conf-train",
            "--manifest",
            "corpus/manifest.json",
            "--epochs",
            "2",
            "--kind",
            "scalar",
            "--out",
            "p1",
        ],
    );
    let out = face3d(
        d,
        &[
            "aggregate",
            "--manifest",
            "corpus/manifest.json",
            "--strategy",
            "s4",
            "--predictor",
            "p1/predictor.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    ok(
        d,
        &[
            "aggregate",
            "--manifest",
            "corpus/manifest.json",
            "--strategy",
            "s1",
            "--predictor",
            "p1/predictor.json",
            "--out",
            "s1",
        ],
    );
}

fn sphere(radius: f64, rings: usize, segments: usize) -> Mesh {
    let mut v = vec![Vec3::new(0.0, 0.0, radius)];
    for i in 1..rings {
        let theta = std::f64::consts::PI * i as f64 / rings as f64;
        for j in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / segments as f64;
            v.push(radius * Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()));
        }
    }
    v.push(Vec3::new(0.0, 0.0, -radius));
    let ring = |i: usize, j: usize| 1 + (i - 1) * segments + j % segments;
    let south = v.len() - 1;
    let mut t = Vec::new();
    for j in 0..segments {
        t.push([0, ring(1, j), ring(1, j + 1)]);
        t.push([south, ring(rings - 1, j + 1), ring(rings - 1, j)]);
    }
    for i in 1..rings - 1 {
        for j in 0..segments {
            t.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
            t.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
        }
    }
    Mesh::new(v, t, None).unwrap()
}

#[test]
fn eval_reports_zero_for_identity_and_the_normal_offset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_obj(&sphere(50.0, 40, 80), d.join("truth.obj")).unwrap();
    write_obj(&sphere(52.0, 40, 80), d.join("offset.obj")).unwrap();
    ok(
        d,
        &[
            "eval",
            "--predicted",
            "truth.obj",
            "--truth",
            "truth.obj",
            "--out",
            "same.json",
        ],
    );
    let r = json(d.join("same.json"));
    assert!(r["mean"].as_f64().unwrap() < 1e-9);
    assert_eq!(r["per_subject"].as_array().unwrap().len(), 1);
    assert!(r.get("std").is_some());

    ok(
        d,
        &[
            "eval",
            "--predicted",
            "offset.obj",
            "truth.obj",
            "--truth",
            "truth.obj",
            "--rigid",
            "--out",
            "rigid.json",
        ],
    );
    let r = json(d.join("rigid.json"));
    let offset = r["per_subject"][0]["rmse"].as_f64().unwrap();
    assert!((offset - 2.0).abs() <= 0.1, "rigid protocol offset rmse {offset}");

    let out = face3d(
        d,
        &[
            "eval",
            "--predicted",
            "truth.obj",
            "offset.obj",
            "--truth",
            "truth.obj",
            "offset.obj",
            "truth.obj",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn skin_training_from_csv_is_accurate_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_labeled_csv(&synthetic_skin_corpus(3000, 21), d.join("colors.csv")).unwrap();
    ok(
        d,
        &[
            "--seed",
            "4",
            "skin-train",
            "--csv",
            "colors.csv",
            "--components",
            "3",
            "--out",
            "a",
        ],
    );
    ok(
        d,
        &[
            "--seed",
            "4",
            "skin-train",
            "--csv",
            "colors.csv",
            "--components",
            "3",
            "--out",
            "b",
        ],
    );
    let r: SkinReport = read_json(&d.join("a/skin_report.json")).unwrap();
    assert!(r.holdout_accuracy >= 0.95, "{r:?}");
    assert_eq!(r.holdout_samples, 600);
    assert_eq!(
        std::fs::read(d.join("a/skin_gmm.json")).unwrap(),
        std::fs::read(d.join("b/skin_gmm.json")).unwrap()
    );
    // a trained classifier plugs back into the run config
    ok(
        d,
        &[
            "--set",
            "attention.skin=\"a/skin_gmm.json\"",
            "--set",
            "attention.fit=true",
            "synth",
            "--count",
            "1",
            "--size",
            "32",
            "--poses",
            "frontal",
            "--out",
            "c",
        ],
    );
}

fn schema_for(file: &Path) -> Option<&'static str> {
    let name = file.file_name()?.to_str()?;
    Some(match name {
        "manifest.json" | "single.json" => "manifest",
        "trace.json" => "fit_trace",
        "aggregate.json" => "aggregate",
        "strategy_report.json" => "strategy_report",
        "predictor.json" => "predictor",
        "training.json" => "training",
        "skin_gmm.json" => "skin_gmm",
        "skin_report.json" => "skin_report",
        "eval.json" => "eval_report",
        _ if name.ends_with(".coef.json") || name.ends_with(".truth.json") || name == "coefficients.json" => {
            "coefficients"
        }
        _ => return None,
    })
}

fn json_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "json") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn emitted_json_validates_against_the_shipped_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_corpus(d);
    ok(
        d,
        &[
            "fit",
            "--image",
            "corpus/subject_000/view_00.png",
            "--landmarks",
            "corpus/subject_000/view_00.lm.txt",
            "--iterations",
            "30",
            "--out",
            "fit",
        ],
    );
    let failed = face3d(
        d,
        &[
            "fit",
            "--image",
            "corpus/subject_001/view_00.png",
            "--landmarks",
            "corpus/subject_001/view_00.lm.txt",
            "--iterations",
            "30",
            "--set",
            "fit.divergence_threshold=1e-12",
            "--out",
            "failed",
        ],
    );
    assert_eq!(failed.status.code(), Some(3));
    ok(
        d,
        &[
            "conf-train",
            "--manifest",
            "corpus/manifest.json",
            "--epochs",
            "2",
            "--out",
            "conf",
        ],
    );
    ok(
        d,
        &[
            "aggregate",
            "--manifest",
            "corpus/manifest.json",
            "--strategy",
            "s3",
            "--predictor",
            "conf/predictor.json",
            "--sorted",
            "--evaluate",
            "--out",
            "agg",
        ],
    );
    ok(
        d,
        &["skin-train", "--synthetic", "500", "--components", "2", "--out", "skin"],
    );
    ok(
        d,
        &[
            "eval",
            "--predicted",
            "agg/subject_000.obj",
            "--truth",
            "corpus/subject_000/truth.obj",
            "--out",
            "eval.json",
        ],
    );

    let schemas = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas");
    let mut seen = std::collections::BTreeSet::new();
    for file in json_files(d) {
        let kind = schema_for(&file).unwrap_or_else(|| panic!("no schema for {}", file.display()));
        let schema = json(schemas.join(format!("{kind}.schema.json")));
        let validator = jsonschema::validator_for(&schema).unwrap();
        let instance = json(&file);
        let errors: Vec<String> = validator
            .iter_errors(&instance)
            .map(|e| format!("{e} at {}", e.instance_path))
            .collect();
        assert!(errors.is_empty(), "{} vs {kind}: {errors:?}", file.display());
        seen.insert(kind);
    }
    let all = std::fs::read_dir(&schemas).unwrap().count();
    assert_eq!(seen.len(), all, "some schemas were not exercised: {seen:?}");
}
