//! Linear-light RGB image buffers and their 8-bit sRGB encoding.
//!
//! Pixel values live in linear [0, 1]. On disk images are 8-bit sRGB PNG,
//! converted with the piecewise IEC 61966-2-1 transfer function:
//!
//! ```text
//! decode(v) = v / 12.92                      if v <= 0.04045
//!           = ((v + 0.055) / 1.055)^2.4      otherwise
//! encode(l) = 12.92 l                        if l <= 0.0031308
//!           = 1.055 l^(1/2.4) - 0.055        otherwise
//! ```
//!
//! with `v = byte / 255` and encoded values rounded to the nearest byte.

use std::path::Path;
use std::sync::OnceLock;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dimension(format!(
                "{} values for a {width}x{height} rgb image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Columns `[x0, x1)` as a new image.
    pub fn crop_columns(&self, x0: usize, x1: usize) -> Image {
        assert!(x0 <= x1 && x1 <= self.width);
        let w = x1 - x0;
        let mut data = Vec::with_capacity(w * self.height * 3);
        for y in 0..self.height {
            let row = y * self.width;
            data.extend_from_slice(&self.data[(row + x0) * 3..(row + x1) * 3]);
        }
        Image {
            width: w,
            height: self.height,
            data,
        }
    }

    /// Box-filter downscale by an integer factor (partial edge blocks are averaged too).
    pub fn downscale(&self, factor: usize) -> Image {
        let factor = factor.max(1);
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        let mut out = Image::new(w, h);
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = [0.0; 3];
                let mut n = 0.0;
                for y in oy * factor..((oy + 1) * factor).min(self.height) {
                    for x in ox * factor..((ox + 1) * factor).min(self.width) {
                        let p = self.pixel(x, y);
                        acc[0] += p[0];
                        acc[1] += p[1];
                        acc[2] += p[2];
                        n += 1.0;
                    }
                }
                out.set_pixel(ox, oy, [acc[0] / n, acc[1] / n, acc[2] / n]);
            }
        }
        out
    }

    /// Snap every value onto the 8-bit sRGB grid, i.e. what a PNG round trip yields.
    pub fn quantize_srgb8(&mut self) {
        for v in &mut self.data {
            *v = srgb8_to_linear(linear_to_srgb8(*v));
        }
    }

    pub fn to_rgb8(&self) -> ::image::RgbImage {
        let bytes = self.data.iter().map(|&v| linear_to_srgb8(v)).collect();
        ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb8(img: &::image::RgbImage) -> Image {
        let data = img.as_raw().iter().map(|&b| srgb8_to_linear(b)).collect();
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, ::image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = ::image::open(path)
            .map_err(|e| Error::load(path, e.to_string()))?
            .to_rgb8();
        Ok(Image::from_rgb8(&img))
    }
}

fn decode_table() -> &'static [f64; 256] {
    static TABLE: OnceLock<[f64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; 256];
        for (i, v) in t.iter_mut().enumerate() {
            let s = i as f64 / 255.0;
            *v = if s <= 0.04045 {
                s / 12.92
            } else {
                ((s + 0.055) / 1.055).powf(2.4)
            };
        }
        t
    })
}

#[inline]
pub fn srgb8_to_linear(byte: u8) -> f64 {
    decode_table()[byte as usize]
}

#[inline]
pub fn linear_to_srgb8(linear: f64) -> u8 {
    let l = if linear.is_nan() { 0.0 } else { linear.clamp(0.0, 1.0) };
    let s = if l <= 0.003_130_8 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    };
    (s * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Greyscale mask as PNG (1 → white).
pub fn save_mask_png(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let bytes = mask.iter().map(|&m| if m { 255u8 } else { 0 }).collect();
    let img = ::image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Dimension("mask length does not match dimensions".into()))?;
    img.save_with_format(path, ::image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_round_trip_is_exact_for_every_byte() {
        for b in 0..=255u8 {
            assert_eq!(linear_to_srgb8(srgb8_to_linear(b)), b);
        }
    }

    #[test]
    fn crop_columns_takes_the_requested_block() {
        let mut img = Image::new(5, 2);
        for y in 0..2 {
            for x in 0..5 {
                img.set_pixel(x, y, [x as f64, y as f64, 0.0]);
            }
        }
        let right = img.crop_columns(2, 5);
        assert_eq!(right.width(), 3);
        assert_eq!(right.pixel(0, 1), [2.0, 1.0, 0.0]);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Image::from_vec(2, 2, vec![0.0; 11]).is_err());
    }
}
