//! Command-line surface of face3d.

pub mod commands;
pub mod config;
pub mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use face3d::geom::Metric;
use face3d::synth::{default_pose_grid, PoseSpec};

use crate::commands::{
    cmd_aggregate, cmd_conf_train, cmd_eval, cmd_fit, cmd_render, cmd_skin_train, cmd_synth, fit_manifest,
    AggregateOptions, PredictorKind, Session, SkinSource, Strategy,
};
use crate::config::{RunConfig, CONFIG_ENV};
use crate::io::Manifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_BAD_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "face3d",
    version,
    about = "3D morphable face model fitting and multi-image shape aggregation"
)]
pub struct Cli {
    /// TOML run config.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set fit.iterations=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory (a file for `eval` and `render`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Model container; the toy model if omitted.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PosePreset {
    /// Pitch {-15, 0, 20, 25} x yaw {-80, -40, 0, 40, 80}.
    Grid,
    /// One near-frontal view with ±8.6° pitch, ±14.3° yaw, ±2.9° roll jitter.
    Frontal,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one image, or every image of a manifest.
    Fit {
        #[arg(long, required_unless_present = "manifest", requires = "landmarks")]
        image: Option<PathBuf>,
        #[arg(long)]
        landmarks: Option<PathBuf>,
        #[arg(long, conflicts_with = "image")]
        manifest: Option<PathBuf>,
        /// Refit even when cached coefficients exist.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Render a synthetic benchmark corpus.
    Synth {
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, value_enum)]
        poses: Option<PosePreset>,
        /// Probability that a view is occluded and its landmarks degraded.
        #[arg(long)]
        occlusion: Option<f64>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Aggregate the identity of each set in a manifest.
    Aggregate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Strategy::S4)]
        strategy: Strategy,
        /// Trained predictor JSON; zero-init (uniform) if omitted.
        #[arg(long)]
        predictor: Option<PathBuf>,
        /// Also report confidence sums in descending order.
        #[arg(long)]
        sorted: bool,
        /// Compare every strategy against the truth meshes.
        #[arg(long)]
        evaluate: bool,
        /// Scalar predictor adding the S1 row to the comparison.
        #[arg(long, requires = "evaluate")]
        scalar_predictor: Option<PathBuf>,
    },
    /// Train the confidence predictor on a manifest.
    ConfTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value_t = PredictorKind::Vector)]
        kind: PredictorKind,
    },
    /// Train the skin color classifier.
    SkinTrain {
        /// CSV of r,g,b,label rows (label 1 = skin).
        #[arg(long, required_unless_present = "synthetic")]
        csv: Option<PathBuf>,
        /// Use a generated corpus of this many samples instead of a CSV.
        #[arg(long, conflicts_with = "csv")]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 4)]
        components: usize,
    },
    /// Geometric error of predicted meshes against ground truth.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        predicted: Vec<PathBuf>,
        /// One mesh for all predictions, or one per prediction.
        #[arg(long, required = true, num_args = 1..)]
        truth: Vec<PathBuf>,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
        #[arg(long)]
        crop_radius: Option<f64>,
        /// Rigid alignment instead of similarity ICP.
        #[arg(long)]
        rigid: bool,
    },
    /// Render a coefficient file.
    Render {
        #[arg(long)]
        coefficients: PathBuf,
        #[arg(long, default_value_t = 224)]
        width: usize,
        #[arg(long, default_value_t = 224)]
        height: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    PointToPlane,
    PointToPoint,
}

impl Cli {
    /// The run config with global and command flags applied.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.config.as_deref(), &self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.jobs = j;
        }
        if let Some(m) = &self.model {
            cfg.model = Some(m.clone());
        }
        match &self.command {
            Command::Fit {
                iterations: Some(n), ..
            } => cfg.fit.iterations = *n,
            Command::Synth {
                poses, occlusion, size, ..
            } => {
                match poses {
                    Some(PosePreset::Grid) => {
                        cfg.synth.poses = default_pose_grid();
                        cfg.synth.angle_jitter_deg = [0.0; 3];
                    }
                    Some(PosePreset::Frontal) => {
                        cfg.synth.poses = vec![PoseSpec {
                            pitch_deg: 0.0,
                            yaw_deg: 0.0,
                        }];
                        cfg.synth.angle_jitter_deg = FRONTAL_JITTER_DEG;
                    }
                    None => {}
                }
                if let Some(o) = occlusion {
                    cfg.synth.occlusion = *o;
                }
                if let Some(s) = size {
                    cfg.synth.size = *s;
                }
            }
            Command::ConfTrain { epochs: Some(e), .. } => cfg.train.epochs = *e,
            Command::Eval {
                metric,
                crop_radius,
                rigid,
                ..
            } => {
                if let Some(m) = metric {
                    cfg.eval.metric = match m {
                        MetricArg::PointToPlane => Metric::PointToPlane,
                        MetricArg::PointToPoint => Metric::PointToPoint,
                    };
                }
                if let Some(r) = crop_radius {
                    cfg.eval.crop_radius = *r;
                }
                if *rigid {
                    cfg.eval.icp.estimate_scale = false;
                }
            }
            _ => {}
        }
        Ok(cfg)
    }
}

/// Pose jitter of the `frontal` preset, degrees (pitch, yaw, roll).
pub const FRONTAL_JITTER_DEG: [f64; 3] = [8.6, 14.3, 2.9];

/// Runs a parsed command line and prints a short summary to stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.run_config()?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.output.clone());
    let session = Session::new(cfg)?;
    match &cli.command {
        Command::Fit {
            image: Some(image),
            landmarks: Some(landmarks),
            ..
        } => {
            let r = cmd_fit(&session, image, landmarks, &out)?;
            println!(
                "fit {}: total loss {:.6} (best iteration {}) -> {}",
                image.display(),
                r.loss.total,
                r.best_iteration,
                out.display()
            );
        }
        Command::Fit {
            manifest: Some(m),
            force,
            ..
        } => {
            let manifest = Manifest::load(m)?;
            let (_, stats) = fit_manifest(&session, &manifest, *force)?;
            println!("fitted {} images, {} cached", stats.fitted, stats.cached);
        }
        Command::Fit { .. } => unreachable!("clap requires --image with --landmarks, or --manifest"),
        Command::Synth { count, .. } => {
            let m = cmd_synth(&session, *count, &out)?;
            let images: usize = m.sets.iter().map(|s| s.images.len()).sum();
            println!(
                "{} subjects, {images} images -> {}",
                m.sets.len(),
                out.join("manifest.json").display()
            );
        }
        Command::Aggregate {
            manifest,
            strategy,
            predictor,
            sorted,
            evaluate,
            scalar_predictor,
        } => {
            let opts = AggregateOptions {
                strategy: *strategy,
                predictor: predictor.as_deref(),
                scalar_predictor: scalar_predictor.as_deref(),
                sorted: *sorted,
                evaluate: *evaluate,
                force_fit: false,
            };
            let (report, strategies) = cmd_aggregate(&session, manifest, &opts, &out)?;
            println!(
                "aggregated {} sets -> {}",
                report.sets.len(),
                out.join("aggregate.json").display()
            );
            if let Some(r) = strategies {
                print!("{r}");
            }
        }
        Command::ConfTrain { manifest, kind, .. } => {
            let r = cmd_conf_train(&session, manifest, *kind, &out)?;
            println!(
                "corpus loss {:.6} -> {:.6} -> {}",
                r.losses[0],
                r.best.last().copied().unwrap_or(f64::NAN),
                out.join("predictor.json").display()
            );
        }
        Command::SkinTrain {
            csv,
            synthetic,
            components,
        } => {
            let source = match (csv, synthetic) {
                (Some(p), _) => SkinSource::Csv(p),
                (None, Some(n)) => SkinSource::Synthetic(*n),
                (None, None) => unreachable!("clap requires --csv or --synthetic"),
            };
            let r = cmd_skin_train(&session, source, *components, &out)?;
            println!(
                "held-out accuracy {:.4} ({} samples) -> {}",
                r.holdout_accuracy,
                r.holdout_samples,
                out.join("skin_gmm.json").display()
            );
        }
        Command::Eval { predicted, truth, .. } => {
            let path = if cli.out.is_some() {
                out
            } else {
                out.join("eval_report.json")
            };
            let r = cmd_eval(&session, predicted, truth, &path)?;
            println!(
                "rmse {:.4}±{:.4} mm over {} subjects -> {}",
                r.mean,
                r.std,
                r.per_subject.len(),
                path.display()
            );
        }
        Command::Render {
            coefficients,
            width,
            height,
        } => {
            let path = if cli.out.is_some() { out } else { out.join("render.png") };
            cmd_render(&session, coefficients, *width, *height, &path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

/// Exit code for an error: numeric breakdown anywhere in the chain gives 3,
/// everything else is bad input.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<face3d::Error>())
        .any(face3d::Error::is_numeric);
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_BAD_INPUT
    }
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_BAD_INPUT } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .try_init();
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
