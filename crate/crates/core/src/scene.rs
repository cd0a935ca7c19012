//! Spherical-harmonics Lambertian shading, rigid pose and perspective projection.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Vec3, SH_COEFFS};

const SQRT_PI: f64 = 1.772_453_850_905_516;
/// `Y₀⁰ = 1 / (2√π)`.
pub const SH_C0: f64 = 0.5 / SQRT_PI;
/// `√(3 / 4π)`.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
/// `½·√(15 / π)`.
pub const SH_C2: f64 = 1.092_548_430_592_079_2;
/// `¼·√(5 / π)`.
pub const SH_C3: f64 = 0.315_391_565_252_520_05;
/// `¼·√(15 / π)`.
pub const SH_C4: f64 = 0.546_274_215_296_039_6;

const UNIT_TOLERANCE: f64 = 1e-6;

/// Monochromatic 3-band SH lighting.
pub type ShLighting = [f64; SH_COEFFS];

/// Real SH basis, bands 0–2, ordered `[Y₀⁰, Y₁⁻¹, Y₁⁰, Y₁¹, Y₂⁻², Y₂⁻¹, Y₂⁰, Y₂¹, Y₂²]`.
pub fn sh_basis(normal: &Vec3) -> Result<[f64; SH_COEFFS]> {
    let len = normal.norm();
    if !((len - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(Error::NonUnitNormal(len));
    }
    Ok(sh_eval(normal))
}

/// [`sh_basis`] without the unit-length check, as a polynomial in `n`.
pub fn sh_eval(n: &Vec3) -> [f64; SH_COEFFS] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ]
}

/// Jacobian rows `∂Y_b/∂n` of [`sh_eval`].
pub fn sh_jacobian(n: &Vec3) -> [Vec3; SH_COEFFS] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        Vec3::zeros(),
        Vec3::new(0.0, SH_C1, 0.0),
        Vec3::new(0.0, 0.0, SH_C1),
        Vec3::new(SH_C1, 0.0, 0.0),
        Vec3::new(SH_C2 * y, SH_C2 * x, 0.0),
        Vec3::new(0.0, SH_C2 * z, SH_C2 * y),
        Vec3::new(0.0, 0.0, 6.0 * SH_C3 * z),
        Vec3::new(SH_C2 * z, 0.0, SH_C2 * x),
        Vec3::new(2.0 * SH_C4 * x, -2.0 * SH_C4 * y, 0.0),
    ]
}

/// Scalar irradiance `Σ_b γ_b Φ_b(n)`.
pub fn irradiance(normal: &Vec3, gamma: &ShLighting) -> f64 {
    sh_eval(normal).iter().zip(gamma).map(|(y, g)| y * g).sum()
}

/// Lambertian radiosity of one vertex, unclamped and clamped to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shaded {
    pub raw: Vec3,
    pub color: Vec3,
}

pub fn shade_vertex(albedo: &Vec3, normal: &Vec3, gamma: &ShLighting) -> Shaded {
    let raw = albedo * irradiance(normal, gamma);
    Shaded {
        raw,
        color: raw.map(|c| c.clamp(0.0, 1.0)),
    }
}

/// Rigid pose: Euler angles in radians and translation in millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// `(pitch, yaw, roll)`.
    pub angles: [f64; 3],
    pub translation: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            angles: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    pub fn new(pitch: f64, yaw: f64, roll: f64, translation: [f64; 3]) -> Self {
        Pose {
            angles: [pitch, yaw, roll],
            translation,
        }
    }

    pub fn pitch(&self) -> f64 {
        self.angles[0]
    }

    pub fn yaw(&self) -> f64 {
        self.angles[1]
    }

    pub fn roll(&self) -> f64 {
        self.angles[2]
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [a, b, c] = self.angles;
        let [x, y, z] = self.translation;
        [a, b, c, x, y, z]
    }

    pub fn from_array(p: [f64; 6]) -> Self {
        Pose {
            angles: [p[0], p[1], p[2]],
            translation: [p[3], p[4], p[5]],
        }
    }

    pub fn translation_vec(&self) -> Vec3 {
        Vec3::from(self.translation)
    }

    /// `R = R_z(roll)·R_y(yaw)·R_x(pitch)`.
    pub fn rotation(&self) -> Matrix3<f64> {
        let [p, y, r] = self.angles;
        rot_z(r) * rot_y(y) * rot_x(p)
    }

    /// `∂R/∂pitch, ∂R/∂yaw, ∂R/∂roll`.
    pub fn rotation_derivatives(&self) -> [Matrix3<f64>; 3] {
        let [p, y, r] = self.angles;
        [
            rot_z(r) * rot_y(y) * drot_x(p),
            rot_z(r) * drot_y(y) * rot_x(p),
            drot_z(r) * rot_y(y) * rot_x(p),
        ]
    }

    /// Contracts a gradient on `R` into gradients on the three angles.
    pub fn angle_gradient(&self, grad_rotation: &Matrix3<f64>) -> [f64; 3] {
        self.rotation_derivatives()
            .map(|d| d.component_mul(grad_rotation).sum())
    }
}

/// `X_cam = R·X + t`.
pub fn pose_transform(positions: &[Vec3], pose: &Pose) -> Vec<Vec3> {
    let r = pose.rotation();
    let t = pose.translation_vec();
    positions.iter().map(|p| r * p + t).collect()
}

/// Pinhole camera; image `y` points down, points in front have `Z > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

/// Focal length for 224×224 images.
pub const DEFAULT_FOCAL_224: f64 = 1015.0;
/// Points with `Z` at or below this (mm) are behind the camera.
pub const NEAR_PLANE: f64 = 1e-3;

impl Camera {
    /// Default camera for a `width × height` image: focal length scaled from
    /// the 224-pixel default, principal point at the image center.
    pub fn default_for(width: usize, height: usize) -> Self {
        Camera {
            focal: DEFAULT_FOCAL_224 * width as f64 / 224.0,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::InvalidInput(format!("focal {} must be > 0", self.focal)));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn project_point(&self, p: &Vec3) -> Projected {
        Projected {
            u: self.focal * p.x / p.z + self.cx,
            v: self.cy - self.focal * p.y / p.z,
            depth: p.z,
            in_front: p.z > NEAR_PLANE,
        }
    }

    /// Pulls `(∂L/∂u, ∂L/∂v, ∂L/∂depth)` back onto the camera-space point.
    pub fn project_backward(&self, p: &Vec3, du: f64, dv: f64, ddepth: f64) -> Vec3 {
        let f = self.focal;
        let iz = 1.0 / p.z;
        Vec3::new(
            du * f * iz,
            -dv * f * iz,
            -du * f * p.x * iz * iz + dv * f * p.y * iz * iz + ddepth,
        )
    }
}

/// A projected vertex in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub in_front: bool,
}

pub fn project_perspective(camera_space: &[Vec3], camera: &Camera) -> Vec<Projected> {
    camera_space.iter().map(|p| camera.project_point(p)).collect()
}
