//! Differentiable 3D morphable face model fitting.
//!
//! The crate covers the linear face model, spherical-harmonics shading,
//! a z-buffered rasterizer with hand-written adjoints, the hybrid fitting
//! loss, Adam-based single-image fitting, confidence-weighted multi-image
//! shape aggregation and an ICP-based geometric evaluation protocol.

pub mod aggregate;
pub mod error;
pub mod fit;
pub mod geom;
pub mod image;
pub mod loss;
pub mod model;
pub mod raster;
pub mod render;
pub mod scene;
pub mod skin;
pub mod synth;

pub use error::{Error, Result};
pub use model::{CoefficientVector, MorphableModel, Vec3};

/// Writes `bytes` to a sibling temporary file and renames it over `path`, so
/// readers never observe a partially written file.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
