//! Grayscale raster with intensities in `[0, 1]`, plus PNG/PGM reading and writing.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(i) = data
            .iter()
            .position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::invalid(format!(
                "pixel {i} has value {} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image from a per-pixel function of `(row, col)`; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c).clamp(0.0, 1.0));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Pixel lookup with coordinates clamped to the image (edge replication).
    #[inline]
    pub fn get_clamped(&self, row: i64, col: i64) -> f64 {
        let r = row.clamp(0, self.height as i64 - 1) as usize;
        let c = col.clamp(0, self.width as i64 - 1) as usize;
        self.get(r, c)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Loads a PNG or PGM file. 8- and 16-bit inputs are normalized by their maximum
    /// code value; color inputs are converted to BT.601 luma first.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        Self::from_dynamic(&img)
    }

    pub fn from_dynamic(img: &DynamicImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f64> = match img {
            DynamicImage::ImageLuma8(buf) => buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect(),
            DynamicImage::ImageLumaA8(buf) => {
                buf.pixels().map(|p| p.0[0] as f64 / 255.0).collect()
            }
            DynamicImage::ImageLuma16(buf) => {
                buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect()
            }
            DynamicImage::ImageLumaA16(buf) => {
                buf.pixels().map(|p| p.0[0] as f64 / 65535.0).collect()
            }
            other => other
                .to_rgb32f()
                .pixels()
                .map(|p| {
                    let [r, g, b] = p.0;
                    (0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64).clamp(0.0, 1.0)
                })
                .collect(),
        };
        Self::new(w, h, data)
    }

    /// Quantizes to 8 bits.
    pub fn to_luma8(&self) -> ImageBuffer<Luma<u8>, Vec<u8>> {
        let pixels = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, pixels)
            .expect("buffer length matches dimensions")
    }

    /// Writes an 8-bit grayscale image; the format follows the file extension (`.png`, `.pgm`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_luma8().save(path.as_ref())?;
        Ok(())
    }
}
