//! Z-buffered triangle rasterization with pixel-center sampling.

use crate::image::{Image, Rgb};
use crate::model::Vec3;
use crate::scene::Projected;

/// The triangle visible at a pixel and its perspective-correct barycentrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub triangle: usize,
    pub bary: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderBuffer {
    pub width: usize,
    pub height: usize,
    pub color: Vec<Rgb>,
    /// Reprojected face region.
    pub mask: Vec<bool>,
    /// Millimeters, `+∞` where nothing was drawn.
    pub depth: Vec<f64>,
    pub fragment: Vec<Option<Fragment>>,
}

impl RenderBuffer {
    pub fn image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.color.clone(),
        }
    }

    pub fn covered_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Checks that mask, depth and fragment agree and barycentrics are valid.
    pub fn check_consistency(&self) -> Result<(), String> {
        for i in 0..self.mask.len() {
            let m = self.mask[i];
            if m != self.fragment[i].is_some() || m != self.depth[i].is_finite() {
                return Err(format!("pixel {i}: mask/fragment/depth disagree"));
            }
            if let Some(f) = self.fragment[i] {
                let s: f64 = f.bary.iter().sum();
                if f.bary.iter().any(|&b| b < 0.0) || (s - 1.0).abs() > 1e-9 {
                    return Err(format!("pixel {i}: invalid barycentrics {:?}", f.bary));
                }
            }
        }
        Ok(())
    }
}

/// Signed edge function; positive when `p` is left of `a → b` in pixel
/// coordinates.
#[inline]
pub fn edge_function(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Tie rule for pixel centers lying exactly on an edge: of the two
/// opposite orientations of a shared edge exactly one owns it.
#[inline]
pub fn owns_edge(a: (f64, f64), b: (f64, f64)) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    dy < 0.0 || (dy == 0.0 && dx > 0.0)
}

/// Screen-space barycentric weights of `p` for a front-facing triangle, or
/// `None` when `p` is not covered (or the triangle is culled).
#[inline]
pub fn screen_coverage(v: [(f64, f64); 3], p: (f64, f64)) -> Option<[f64; 3]> {
    let area = edge_function(v[0], v[1], v[2]);
    if !(area > 0.0) {
        return None;
    }
    let w = [
        edge_function(v[1], v[2], p),
        edge_function(v[2], v[0], p),
        edge_function(v[0], v[1], p),
    ];
    for k in 0..3 {
        let inside = w[k] > 0.0 || (w[k] == 0.0 && owns_edge(v[(k + 1) % 3], v[(k + 2) % 3]));
        if !inside {
            return None;
        }
    }
    Some([w[0] / area, w[1] / area, w[2] / area])
}

/// Perspective-correct depth and attribute weights from screen barycentrics.
#[inline]
pub fn perspective_weights(screen: [f64; 3], depths: [f64; 3]) -> (f64, [f64; 3]) {
    let q = [screen[0] / depths[0], screen[1] / depths[1], screen[2] / depths[2]];
    let inv = q[0] + q[1] + q[2];
    (1.0 / inv, [q[0] / inv, q[1] / inv, q[2] / inv])
}

/// Rasterizes front-facing triangles whose three vertices lie in front of the
/// camera. Nearest interpolated depth wins; exact ties keep the lower
/// triangle index.
pub fn rasterize(
    vertices: &[Projected],
    triangles: &[[usize; 3]],
    colors: &[Vec3],
    width: usize,
    height: usize,
    background: Rgb,
) -> RenderBuffer {
    let n = width * height;
    let mut color = vec![background; n];
    let mut depth = vec![f64::INFINITY; n];
    let mut fragment: Vec<Option<Fragment>> = vec![None; n];

    for (t, &[i0, i1, i2]) in triangles.iter().enumerate() {
        let pv = [vertices[i0], vertices[i1], vertices[i2]];
        if pv.iter().any(|p| !p.in_front || !p.u.is_finite() || !p.v.is_finite()) {
            continue;
        }
        let v = pv.map(|p| (p.u, p.v));
        if !(edge_function(v[0], v[1], v[2]) > 0.0) {
            continue;
        }
        let min_u = v.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let max_u = v.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let min_v = v.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let max_v = v.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if max_u < -1.0 || max_v < -1.0 || min_u > width as f64 + 1.0 || min_v > height as f64 + 1.0 {
            continue;
        }
        let x0 = ((min_u - 1.5).floor().max(0.0)) as usize;
        let y0 = ((min_v - 1.5).floor().max(0.0)) as usize;
        let x1 = ((max_u + 0.5).ceil().max(0.0) as usize).min(width.saturating_sub(1));
        let y1 = ((max_v + 0.5).ceil().max(0.0) as usize).min(height.saturating_sub(1));
        let depths = pv.map(|p| p.depth);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                let Some(b) = screen_coverage(v, p) else {
                    continue;
                };
                let (z, lambda) = perspective_weights(b, depths);
                let idx = y * width + x;
                if z < depth[idx] {
                    depth[idx] = z;
                    let c = colors[i0] * lambda[0] + colors[i1] * lambda[1] + colors[i2] * lambda[2];
                    color[idx] = [c.x, c.y, c.z];
                    fragment[idx] = Some(Fragment {
                        triangle: t,
                        bary: lambda,
                    });
                }
            }
        }
    }
    let mask = fragment.iter().map(|f| f.is_some()).collect();
    RenderBuffer {
        width,
        height,
        color,
        mask,
        depth,
        fragment,
    }
}

/// Reference rasterizer: every pixel tests every triangle. Same coverage,
/// depth and tie rules as [`rasterize`] without the bounding-box traversal.
pub fn rasterize_all_pairs(
    vertices: &[Projected],
    triangles: &[[usize; 3]],
    colors: &[Vec3],
    width: usize,
    height: usize,
    background: Rgb,
) -> RenderBuffer {
    let n = width * height;
    let mut color = vec![background; n];
    let mut depth = vec![f64::INFINITY; n];
    let mut fragment: Vec<Option<Fragment>> = vec![None; n];
    for y in 0..height {
        for x in 0..width {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let idx = y * width + x;
            for (t, &[i0, i1, i2]) in triangles.iter().enumerate() {
                let pv = [vertices[i0], vertices[i1], vertices[i2]];
                if pv.iter().any(|p| !p.in_front || !p.u.is_finite() || !p.v.is_finite()) {
                    continue;
                }
                let Some(b) = screen_coverage(pv.map(|p| (p.u, p.v)), p) else {
                    continue;
                };
                let (z, lambda) = perspective_weights(b, pv.map(|p| p.depth));
                if z < depth[idx] {
                    depth[idx] = z;
                    let c = colors[i0] * lambda[0] + colors[i1] * lambda[1] + colors[i2] * lambda[2];
                    color[idx] = [c.x, c.y, c.z];
                    fragment[idx] = Some(Fragment {
                        triangle: t,
                        bary: lambda,
                    });
                }
            }
        }
    }
    let mask = fragment.iter().map(|f| f.is_some()).collect();
    RenderBuffer {
        width,
        height,
        color,
        mask,
        depth,
        fragment,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(u: f64, v: f64, depth: f64) -> Projected {
        Projected {
            u,
            v,
            depth,
            in_front: depth > 1e-3,
        }
    }

    #[test]
    fn nearer_triangle_wins_overlap() {
        // Both triangles front-facing (positive edge-function area).
        let verts = vec![
            pv(2.0, 2.0, 200.0),
            pv(14.0, 2.0, 200.0),
            pv(2.0, 14.0, 200.0),
            pv(4.0, 4.0, 100.0),
            pv(15.0, 4.0, 100.0),
            pv(4.0, 15.0, 100.0),
        ];
        let tris = [[0, 1, 2], [3, 4, 5]];
        let colors = vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(0.0, 0.0, 1.0),
        ];
        let b = rasterize(&verts, &tris, &colors, 16, 16, [0.0; 3]);
        b.check_consistency().unwrap();
        let idx = 5 * 16 + 5;
        assert_eq!(b.fragment[idx].unwrap().triangle, 1);
        assert_eq!(b.color[idx], [0.0, 0.0, 1.0]);
        assert!((b.depth[idx] - 100.0).abs() < 1e-9);
        let idx = 2 * 16 + 2;
        assert_eq!(b.fragment[idx].unwrap().triangle, 0);
        // Outside everything.
        let idx = 15 * 16 + 15;
        assert!(!b.mask[idx]);
        assert_eq!(b.color[idx], [0.0; 3]);
        assert!(b.depth[idx].is_infinite());
    }

    #[test]
    fn back_facing_triangles_are_culled() {
        let verts = vec![pv(1.0, 1.0, 10.0), pv(10.0, 1.0, 10.0), pv(1.0, 10.0, 10.0)];
        let front = rasterize(&verts, &[[0, 1, 2]], &[Vec3::zeros(); 3], 12, 12, [0.0; 3]);
        let back = rasterize(&verts, &[[0, 2, 1]], &[Vec3::zeros(); 3], 12, 12, [0.0; 3]);
        assert!(front.covered_pixels() > 0);
        assert_eq!(back.covered_pixels(), 0);
    }

    #[test]
    fn shared_edge_pixels_are_drawn_exactly_once() {
        // A square split along its diagonal, with pixel centers on the diagonal.
        let verts = vec![
            pv(0.0, 0.0, 5.0),
            pv(8.0, 0.0, 5.0),
            pv(8.0, 8.0, 5.0),
            pv(0.0, 8.0, 5.0),
        ];
        let a = rasterize(&verts, &[[0, 2, 3]], &[Vec3::zeros(); 4], 8, 8, [0.0; 3]);
        let b = rasterize(&verts, &[[0, 1, 2]], &[Vec3::zeros(); 4], 8, 8, [0.0; 3]);
        for i in 0..64 {
            assert!(a.mask[i] ^ b.mask[i], "pixel {i}");
        }
    }

    #[test]
    fn behind_camera_triangles_are_skipped() {
        let verts = vec![pv(1.0, 1.0, -10.0), pv(10.0, 1.0, 10.0), pv(1.0, 10.0, 10.0)];
        let b = rasterize(&verts, &[[0, 1, 2]], &[Vec3::zeros(); 3], 12, 12, [0.5; 3]);
        assert_eq!(b.covered_pixels(), 0);
        assert!(b.color.iter().all(|c| *c == [0.5; 3]));
    }
}
