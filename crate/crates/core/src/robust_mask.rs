//! Transient-occluder masking.
//!
//! Each image keeps the minimum, maximum and latest unmasked L1 loss. The
//! latest loss's position between min and max sets the fraction `k` of pixels
//! to distrust; the `(1 − k)` quantile of the per-pixel residual becomes the
//! inlier threshold. Rows in the upper part of the image are always inliers,
//! and the labels are smoothed with a 5×5 box filter before thresholding.
//!
//! The box filter averages over the in-image part of its window, so a field
//! of inliers stays all inliers up to the border.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub per_min: f64,
    pub per_max: f64,
    /// Rows with `y ≤ upper_fraction · H` are always inliers.
    pub upper_fraction: f64,
    pub blur_radius: usize,
    /// Blurred inlier value needed to stay an inlier.
    pub keep_threshold: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            per_min: 0.05,
            per_max: 0.40,
            upper_fraction: 0.4,
            blur_radius: 2,
            keep_threshold: 0.4,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.per_min) && unit(self.per_max) && self.per_min <= self.per_max) {
            return Err(Error::Argument(format!(
                "mask fractions must satisfy 0 <= per_min ({}) <= per_max ({}) <= 1",
                self.per_min, self.per_max
            )));
        }
        Ok(())
    }
}

/// Loss statistics of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub min: f64,
    pub max: f64,
    pub current: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub config: MaskConfig,
    pub stats: Vec<Option<LossStats>>,
}

impl MaskState {
    pub fn new(config: MaskConfig, num_images: usize) -> Self {
        Self {
            config,
            stats: vec![None; num_images],
        }
    }

    /// Records the unmasked L1 loss of image `j`.
    pub fn update_stats(&mut self, j: usize, l1: f64) {
        debug_assert!(l1.is_finite() && l1 >= 0.0);
        self.stats[j] = Some(match self.stats[j] {
            None => LossStats {
                min: l1,
                max: l1,
                current: l1,
            },
            Some(s) => LossStats {
                min: s.min.min(l1),
                max: s.max.max(l1),
                current: l1,
            },
        });
    }

    /// Fraction of pixels of image `j` to treat as outliers.
    pub fn mask_fraction(&self, j: usize) -> f64 {
        let c = &self.config;
        match self.stats[j] {
            Some(s) if s.max > s.min => {
                (s.current - s.min) / (s.max - s.min) * (c.per_max - c.per_min) + c.per_min
            }
            _ => c.per_min,
        }
    }
}

/// `T_ε`: the `(1 − k)` quantile of `residuals` with lower interpolation.
pub fn residual_threshold(residuals: &[f64], k: f64) -> f64 {
    assert!(!residuals.is_empty());
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((1.0 - k) * (sorted.len() - 1) as f64).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Binary inlier mask `W` (`true` = use the pixel) for a `width × height`
/// residual field `ε`, given the outlier fraction `k`.
pub fn build_mask(residuals: &[f64], k: f64, width: usize, height: usize, config: &MaskConfig) -> Vec<bool> {
    assert_eq!(residuals.len(), width * height);
    let threshold = residual_threshold(residuals, k);
    let upper = config.upper_fraction * height as f64;
    let raw: Vec<bool> = residuals
        .iter()
        .enumerate()
        .map(|(p, &e)| e <= threshold || (p / width) as f64 <= upper)
        .collect();
    let blurred = box_average(&raw, width, height, config.blur_radius);
    blurred.iter().map(|&b| b >= config.keep_threshold).collect()
}

/// Mean of `labels` over each `(2r+1)²` window with zero padding, computed
/// with summed-area tables.
pub fn box_average(labels: &[bool], width: usize, height: usize, radius: usize) -> Vec<f64> {
    let sw = width + 1;
    let mut sat = vec![0u32; sw * (height + 1)];
    for y in 0..height {
        let mut row = 0;
        for x in 0..width {
            row += labels[y * width + x] as u32;
            sat[(y + 1) * sw + x + 1] = sat[y * sw + x + 1] + row;
        }
    }
    let area = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(height));
        for x in 0..width {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(width));
            let sum = sat[y1 * sw + x1] + sat[y0 * sw + x0] - sat[y0 * sw + x1] - sat[y1 * sw + x0];
            out[y * width + x] = sum as f64 / area;
        }
    }
    out
}

/// Per-pixel `ε(r)`: mean over channels of `|a − b|`.
pub fn residual_field(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    a.chunks(3)
        .zip(b.chunks(3))
        .map(|(x, y)| ((x[0] - y[0]).abs() + (x[1] - y[1]).abs() + (x[2] - y[2]).abs()) / 3.0)
        .collect()
}
