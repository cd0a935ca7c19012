//! Files exchanged between commands: landmarks, coefficients, manifests.

use std::path::{Path, PathBuf};

use face3d::model::{CoefficientVector, ModelDims};
use face3d::synth::Occluder;
use face3d::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Reads `n` lines of "u v" pixel coordinates. Blank lines and `#` comments
/// are skipped.
pub fn read_landmarks(path: &Path, n: usize) -> Result<Vec<[f64; 2]>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let bad = |line: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let mut points = Vec::with_capacity(n);
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let mut coord = || -> Result<f64> {
            let v: f64 = it
                .next()
                .ok_or_else(|| bad(i + 1, "expected two numbers"))?
                .parse()
                .map_err(|_| bad(i + 1, "not a number"))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(i + 1, "non-finite coordinate"))
            }
        };
        let p = [coord()?, coord()?];
        if it.next().is_some() {
            return Err(bad(i + 1, "expected two numbers"));
        }
        points.push(p);
    }
    if points.len() != n {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("expected {n} landmarks, found {}", points.len()),
        });
    }
    Ok(points)
}

pub fn write_landmarks(path: &Path, points: &[[f64; 2]]) -> Result<()> {
    let mut s = String::with_capacity(points.len() * 40);
    for p in points {
        s.push_str(&format!("{} {}\n", p[0], p[1]));
    }
    face3d::write_atomic(path, s.as_bytes())
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value)?;
    buf.push(b'\n');
    face3d::write_atomic(path, &buf)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_coefficients(path: &Path, dims: ModelDims) -> Result<CoefficientVector> {
    let x: CoefficientVector = read_json(path)?;
    x.dims_match(dims)?;
    if x.flatten().iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: "non-finite coefficient".into(),
        });
    }
    Ok(x)
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

pub const MANIFEST_VERSION: u32 = 1;

/// One image of a set. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub image: PathBuf,
    pub landmarks: PathBuf,
    /// Fitted coefficients; written by the first fit, reused afterwards.
    pub coefficients: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_coefficients: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pitch_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occluder: Option<Occluder>,
}

/// Images of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSet {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_mesh: Option<PathBuf>,
    pub images: Vec<ManifestImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub sets: Vec<ManifestSet>,
    /// Directory the relative paths resolve against; not serialized.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let mut m: Manifest = read_json(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: format!("unsupported manifest version {}", m.version),
            });
        }
        if m.sets.is_empty() || m.sets.iter().any(|s| s.images.is_empty()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                message: "manifest has an empty set list or an empty set".into(),
            });
        }
        m.root = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }
}
