//! Pixel images in (height, width, channels) layout with values nominally in
//! `[0, 1]`, plus lossless PNG input and output.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::Array3;

use crate::error::{Result, SwapError};

#[derive(Debug, Clone, PartialEq)]
pub struct PixelImage(Array3<f64>);

impl PixelImage {
    pub fn new(values: Array3<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self(Array3::zeros((height, width, channels)))
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self(Array3::from_elem((height, width, channels), value))
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    pub fn channels(&self) -> usize {
        self.0.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.0
    }

    pub fn into_values(self) -> Array3<f64> {
        self.0
    }

    /// Loads a PNG (or any format the codec recognizes) as 1 or 3 channels.
    pub fn load(path: impl AsRef<Path>, channels: usize) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(SwapError::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
        let img = image::open(path)?;
        Self::from_dynamic(img, channels)
    }

    pub fn from_dynamic(img: DynamicImage, channels: usize) -> Result<Self> {
        match channels {
            1 => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                Ok(Self(Array3::from_shape_fn(
                    (h as usize, w as usize, 1),
                    |(y, x, _)| f64::from(g.get_pixel(x as u32, y as u32)[0]) / 255.0,
                )))
            }
            3 => {
                let rgb = img.to_rgb8();
                let (w, h) = rgb.dimensions();
                Ok(Self(Array3::from_shape_fn(
                    (h as usize, w as usize, 3),
                    |(y, x, c)| f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0,
                )))
            }
            n => Err(SwapError::param(format!(
                "unsupported channel count {n}, expected 1 or 3"
            ))),
        }
    }

    /// Quantizes to 8 bits (values clamped to `[0, 1]`) and writes a PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (h, w, c) = self.0.dim();
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match c {
            1 => {
                let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                    Luma([q(self.0[[y as usize, x as usize, 0]])])
                });
                img.save(path)?;
            }
            3 => {
                let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                    let (y, x) = (y as usize, x as usize);
                    Rgb([q(self.0[[y, x, 0]]), q(self.0[[y, x, 1]]), q(self.0[[y, x, 2]])])
                });
                img.save(path)?;
            }
            n => {
                return Err(SwapError::param(format!(
                    "cannot write {n}-channel image as PNG"
                )))
            }
        }
        Ok(())
    }

    /// Rounds every value onto the 8-bit grid, matching what a PNG round-trip produces.
    pub fn quantized(&self) -> Self {
        Self(self.0.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
    }
}
