//! Linear RGB images in `[0, 1]` and PNG I/O.

use std::path::Path;

use crate::error::{check_len, Error, Result};

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, `y` down.
    pub pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        Image {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self> {
        check_len("image pixels", width * height, pixels.len())?;
        Ok(Image { width, height, pixels })
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[self.index(x, y)]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = self.index(x, y);
        self.pixels[i] = c;
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        check_len("rgb8 bytes", 3 * width * height, bytes.len())?;
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
            .collect();
        Ok(Image { width, height, pixels })
    }

    /// Round-trips the image through 8-bit quantization.
    pub fn quantized(&self) -> Image {
        Image::from_rgb8(self.width, self.height, &self.to_rgb8()).expect("same size")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer matches dimensions");
        write_png(&buf, path.as_ref())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
        let img = image::open(path)?.to_rgb8();
        Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
    }
}

/// Writes a boolean mask as an 8-bit grayscale PNG (255 = set).
pub fn save_mask_png(width: usize, height: usize, mask: &[bool], path: impl AsRef<Path>) -> Result<()> {
    check_len("mask", width * height, mask.len())?;
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes).expect("sized");
    write_png(&buf, path.as_ref())
}

/// Writes depth as a 16-bit PNG in tenths of a millimeter; empty pixels are 0.
pub fn save_depth_png(width: usize, height: usize, depth: &[f64], path: impl AsRef<Path>) -> Result<()> {
    check_len("depth", width * height, depth.len())?;
    let data: Vec<u16> = depth
        .iter()
        .map(|&d| {
            if d.is_finite() {
                (d * 10.0).round().clamp(0.0, u16::MAX as f64) as u16
            } else {
                0
            }
        })
        .collect();
    let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
        image::ImageBuffer::from_raw(width as u32, height as u32, data).expect("sized");
    write_png(&buf, path.as_ref())
}

fn write_png<P, C>(buf: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut bytes = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut bytes, image::ImageFormat::Png)?;
    crate::write_atomic(path, bytes.get_ref())
}
