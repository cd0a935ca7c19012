//! Run configuration loaded from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use face3d::aggregate::TrainConfig;
use face3d::fit::FitConfig;
use face3d::geom::EvalProtocol;
use face3d::loss::ProjectionEmbedder;
use face3d::model::load_model;
use face3d::model::{synthesize_toy_model, MorphableModel};
use face3d::scene::Camera;
use face3d::skin::{CompiledSkin, SkinGmm};
use face3d::synth::SynthConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "FACE3D_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelSpec {
    pub vertices: usize,
    pub k_id: usize,
    pub k_exp: usize,
    pub k_tex: usize,
    pub seed: u64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        ToyModelSpec {
            vertices: 500,
            k_id: 10,
            k_exp: 6,
            k_tex: 10,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSpec {
    pub dim: usize,
    pub grid: usize,
    pub seed: u64,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            dim: 128,
            grid: 32,
            seed: 0xfea7,
        }
    }
}

/// Where skin attention comes from and which stages use it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSpec {
    /// Trained classifier JSON; the built-in synthetic classifier if absent.
    pub skin: Option<PathBuf>,
    /// Weight the photometric term of single-image fits.
    pub fit: bool,
    /// Weight the photometric term of the multi-image loss and the
    /// attention feature of the confidence predictor.
    pub aggregate: bool,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        AttentionSpec {
            skin: None,
            fit: false,
            aggregate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model container; the procedural toy model if absent.
    pub model: Option<PathBuf>,
    pub toy: ToyModelSpec,
    /// Explicit intrinsics; otherwise derived from the image size.
    pub camera: Option<CameraSpec>,
    pub embedder: EmbedderSpec,
    pub attention: AttentionSpec,
    pub fit: FitConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub output: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            toy: ToyModelSpec::default(),
            camera: None,
            embedder: EmbedderSpec::default(),
            attention: AttentionSpec::default(),
            fit: FitConfig::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            eval: EvalProtocol::default(),
            output: PathBuf::from("out"),
            seed: 0,
            jobs: 0,
        }
    }
}

impl RunConfig {
    /// Parses a TOML file; relative paths inside are taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with(Some(path), &[])
    }

    /// Parses `path` (or nothing) with `key.path=value` overrides applied on
    /// top. Relative paths resolve against the config file's directory, or
    /// the working directory without one.
    pub fn load_with(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().with_context(|| match path {
            Some(p) => format!("invalid config {}", p.display()),
            None => "invalid config overrides".to_string(),
        })?;
        let base = path.and_then(Path::parent).unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.model.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.attention.skin.as_mut() {
            rebase(p);
        }
        rebase(&mut cfg.output);
        Ok(cfg)
    }

    /// Explicit path, else the environment variable, else defaults; then
    /// the overrides.
    pub fn resolve(explicit: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let env = std::env::var_os(CONFIG_ENV)
            .filter(|p| !p.is_empty())
            .map(PathBuf::from);
        Self::load_with(explicit.or(env.as_deref()), overrides)
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.model.iter().chain(&self.attention.skin) {
            if !p.exists() {
                bail!(face3d::Error::InvalidInput(format!("{}: file not found", p.display())));
            }
        }
        self.fit.validate()?;
        self.synth.validate()?;
        self.train.weights.validate()?;
        Ok(())
    }

    pub fn load_model(&self) -> Result<MorphableModel> {
        Ok(match &self.model {
            Some(p) => load_model(p)?,
            None => {
                let t = &self.toy;
                synthesize_toy_model(t.vertices, t.k_id, t.k_exp, t.k_tex, t.seed)?
            }
        })
    }

    pub fn camera(&self, width: usize, height: usize) -> Result<Camera> {
        let cam = match self.camera {
            Some(c) => Camera {
                focal: c.focal,
                cx: c.cx,
                cy: c.cy,
                width,
                height,
            },
            None => Camera::default_for(width, height),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn embedder(&self) -> Result<ProjectionEmbedder> {
        let e = self.embedder;
        Ok(ProjectionEmbedder::new(e.dim, e.grid, e.seed)?)
    }

    pub fn skin(&self) -> Result<CompiledSkin> {
        let gmm = match &self.attention.skin {
            Some(p) => SkinGmm::load_json(p)?,
            None => SkinGmm::synthetic_default(),
        };
        Ok(gmm.compile()?)
    }

    pub fn thread_pool(&self) -> Result<rayon::ThreadPool> {
        Ok(rayon::ThreadPoolBuilder::new().num_threads(self.jobs).build()?)
    }
}

/// Sets `a.b.c=value` in `table`. The value is read as a TOML literal and
/// falls back to a plain string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!(face3d::Error::InvalidInput(format!(
            "override {assignment:?} is not key=value"
        )));
    };
    let keys: Vec<&str> = key.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!(face3d::Error::InvalidInput(format!("bad override key {key:?}")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| face3d::Error::InvalidInput(format!("override {key:?}: {k} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(
            &p,
            "seed = 4\noutput = \"res\"\n[fit]\niterations = 50\n[fit.weights]\nphoto = 2.0\n",
        )
        .unwrap();
        let c = RunConfig::load(&p).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.fit.iterations, 50);
        assert_eq!(c.fit.weights.photo, 2.0);
        assert_eq!(c.fit.weights.lan, 1.6e-3);
        assert_eq!(c.output, dir.path().join("res"));
        assert_eq!(c.synth, SynthConfig::default());
    }

    #[test]
    fn unknown_keys_and_missing_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "sed = 4\n").unwrap();
        assert!(RunConfig::load(&p).is_err());
        std::fs::write(&p, "model = \"missing.m3dm\"\n").unwrap();
        assert!(RunConfig::load(&p).unwrap().validate().is_err());
        assert!(RunConfig::load(&dir.path().join("nope.toml")).is_err());
    }

    #[test]
    fn overrides_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 4\n[fit]\niterations = 50\n").unwrap();
        let o = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let c = RunConfig::load_with(
            Some(&p),
            &o(&["fit.iterations=7", "train.refit_steps = 0", "synth.size=64"]),
        )
        .unwrap();
        assert_eq!(
            (c.seed, c.fit.iterations, c.train.refit_steps, c.synth.size),
            (4, 7, 0, 64)
        );
        let c = RunConfig::load_with(None, &o(&["output=res", "eval.metric=\"point_to_point\""])).unwrap();
        assert_eq!(c.output, PathBuf::from("res"));
        assert_eq!(c.eval.metric, face3d::geom::Metric::PointToPoint);
        assert!(RunConfig::load_with(None, &o(&["seed"])).is_err());
        assert!(RunConfig::load_with(None, &o(&["seed.x=1"])).is_err());
        assert!(RunConfig::load_with(None, &o(&["fit.iterations=many"])).is_err());
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }
}
