//! Background at infinity: an MLP maps the image embedding to degree-2 SH
//! coefficients, evaluated along each pixel's ray and composited behind the
//! Gaussians. Also home to the residual mask and the alpha loss that push
//! Gaussians out of pixels the background already explains.

use rand::Rng;
use rayon::prelude::*;

use crate::buffer::Image;
use crate::nn::{Mlp, MlpTape};
use crate::raster::RenderOutput;
use crate::scene::CameraView;
use crate::sh::{self, num_basis, Direction, ShCoefficients};
use crate::{sigmoid, Error, Result, BACKGROUND_SH_DEGREE, EMBEDDING_DIM};

pub const COEFFS: usize = 3 * num_basis(BACKGROUND_SH_DEGREE);
pub const HIDDEN: usize = 128;
pub const MLP_SIZES: [usize; 4] = [EMBEDDING_DIM, HIDDEN, HIDDEN, COEFFS];
/// Default residual cut for the background mask, in mean absolute RGB.
pub const DEFAULT_THRESHOLD: f64 = 0.08;
/// Box-filtered mask values above this select a pixel for the alpha loss.
pub const SELECT_ABOVE: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundModel {
    mlp: Mlp,
}

impl BackgroundModel {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            mlp: Mlp::init_he(&MLP_SIZES, rng),
        }
    }

    pub fn from_mlp(mlp: Mlp) -> Result<Self> {
        if mlp.sizes() != MLP_SIZES {
            return Err(Error::Dimension(format!(
                "background MLP {:?}, expected {:?}",
                mlp.sizes(),
                MLP_SIZES
            )));
        }
        Ok(Self { mlp })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    /// Background SH coefficients for an embedding.
    pub fn predict(&self, embedding: &[f64]) -> Result<ShCoefficients> {
        if embedding.len() != EMBEDDING_DIM {
            return Err(Error::Dimension(format!(
                "embedding has {} values, expected {EMBEDDING_DIM}",
                embedding.len()
            )));
        }
        ShCoefficients::from_values(BACKGROUND_SH_DEGREE, self.mlp.infer(embedding, 1))
    }

    /// Predicts coefficients and renders the background for `camera`,
    /// keeping what [`BackgroundModel::backward`] needs.
    pub fn forward(&self, embedding: &[f64], camera: &CameraView) -> Result<BackgroundForward> {
        if embedding.len() != EMBEDDING_DIM {
            return Err(Error::Dimension(format!(
                "embedding has {} values, expected {EMBEDDING_DIM}",
                embedding.len()
            )));
        }
        let (out, tape) = self.mlp.forward(embedding, 1);
        let coeffs = ShCoefficients::from_values(BACKGROUND_SH_DEGREE, out)?;
        let image = background_image(&coeffs, camera);
        Ok(BackgroundForward {
            coeffs,
            tape,
            image,
        })
    }

    /// `(∂L/∂θ_bg, ∂L/∂ℓ)` from `∂L/∂C_background` per pixel.
    pub fn backward(
        &self,
        fwd: &BackgroundForward,
        camera: &CameraView,
        d_image: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let (w, h) = (camera.width, camera.height);
        assert_eq!(d_image.len(), 3 * w * h);
        let n = num_basis(BACKGROUND_SH_DEGREE);
        let values = fwd.coeffs.values();
        let rows: Vec<Vec<f64>> = (0..h)
            .into_par_iter()
            .map(|v| {
                let mut acc = vec![0.0; COEFFS];
                let mut basis = [0.0; 9];
                for u in 0..w {
                    let p = v * w + u;
                    let up = &d_image[3 * p..3 * p + 3];
                    if up == [0.0; 3] {
                        continue;
                    }
                    let d = Direction::new(camera.ray_direction(u, v)).to_array();
                    sh::basis_into(d, BACKGROUND_SH_DEGREE, &mut basis);
                    let l = sh::logits(values, &basis);
                    for c in 0..3 {
                        let s = sigmoid(l[c]);
                        let g = up[c] * s * (1.0 - s);
                        for k in 0..n {
                            acc[c * n + k] += g * basis[k];
                        }
                    }
                }
                acc
            })
            .collect();
        let mut d_coeffs = vec![0.0; COEFFS];
        for r in &rows {
            for (a, b) in d_coeffs.iter_mut().zip(r) {
                *a += b;
            }
        }
        let mut d_mlp = vec![0.0; self.mlp.params().len()];
        let d_embedding = self.mlp.backward(&fwd.tape, &d_coeffs, &mut d_mlp);
        (d_mlp, d_embedding)
    }
}

#[derive(Clone, Debug)]
pub struct BackgroundForward {
    pub coeffs: ShCoefficients,
    tape: MlpTape,
    pub image: Image,
}

/// Background colour seen through pixel `(u, v)`.
pub fn background_color(coeffs: &ShCoefficients, camera: &CameraView, u: usize, v: usize) -> [f64; 3] {
    sh::sh_to_color(coeffs, Direction::new(camera.ray_direction(u, v)))
}

/// Background for every pixel of `camera`.
pub fn background_image(coeffs: &ShCoefficients, camera: &CameraView) -> Image {
    let (w, h) = (camera.width, camera.height);
    let mut data = vec![0.0; 3 * w * h];
    data.par_chunks_mut(3 * w).enumerate().for_each(|(v, row)| {
        for u in 0..w {
            row[3 * u..3 * u + 3].copy_from_slice(&background_color(coeffs, camera, u, v));
        }
    });
    Image::from_vec(w, h, data).expect("buffer size")
}

/// `C_final = C + (1 − α) C_background`.
pub fn composite(foreground: &RenderOutput, background: &Image) -> Result<Image> {
    composite_buffers(&foreground.color, &foreground.alpha, background)
}

pub fn composite_buffers(color: &Image, alpha: &[f64], background: &Image) -> Result<Image> {
    if !color.same_shape(background) || alpha.len() != color.num_pixels() {
        return Err(Error::Dimension(format!(
            "compositing {}x{} over {}x{} with {} alpha values",
            color.width(),
            color.height(),
            background.width(),
            background.height(),
            alpha.len()
        )));
    }
    let mut out = color.clone();
    for (p, px) in out.data_mut().chunks_mut(3).enumerate() {
        let t = 1.0 - alpha[p];
        for c in 0..3 {
            px[c] += t * background.data()[3 * p + c];
        }
    }
    Ok(out)
}

/// Pixels where the background prediction already matches the target.
#[derive(Clone, Debug, PartialEq)]
pub struct BackgroundResidualMask {
    /// `M`: mean absolute residual below the threshold.
    pub matches: Vec<bool>,
    /// `M′`: 3×3 box average of `M` with zero padding.
    pub filtered: Vec<f64>,
    /// `p_i`: `M′ > 0.6`.
    pub selected: Vec<bool>,
    pub threshold: f64,
}

impl BackgroundResidualMask {
    pub fn count(&self) -> usize {
        self.selected.iter().filter(|s| **s).count()
    }
}

pub fn residual_mask(ground_truth: &Image, background: &Image, threshold: f64) -> Result<BackgroundResidualMask> {
    if !ground_truth.same_shape(background) {
        return Err(Error::Dimension("residual mask of differently sized images".into()));
    }
    let (w, h) = (ground_truth.width(), ground_truth.height());
    let matches: Vec<bool> = ground_truth
        .data()
        .chunks(3)
        .zip(background.data().chunks(3))
        .map(|(a, b)| {
            let r = ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0;
            r < threshold
        })
        .collect();
    let mut filtered = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut count = 0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h && matches[yy as usize * w + xx as usize] {
                        count += 1;
                    }
                }
            }
            filtered[y * w + x] = count as f64 / 9.0;
        }
    }
    let selected = filtered.iter().map(|&m| m > SELECT_ABOVE).collect();
    Ok(BackgroundResidualMask {
        matches,
        filtered,
        selected,
        threshold,
    })
}

/// `L_α = λ Σ_{r ∈ p_i} α(r)` and its gradient with respect to `α`.
pub fn alpha_loss(alpha: &[f64], selected: &[bool], lambda: f64) -> (f64, Vec<f64>) {
    assert_eq!(alpha.len(), selected.len());
    let mut loss = 0.0;
    let grad = alpha
        .iter()
        .zip(selected)
        .map(|(&a, &s)| {
            if s {
                loss += a;
                lambda
            } else {
                0.0
            }
        })
        .collect();
    (lambda * loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> CameraView {
        CameraView {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            fx: 10.0,
            fy: 10.0,
            cx: 4.0,
            cy: 4.0,
            width: 8,
            height: 8,
        }
    }

    #[test]
    fn zero_coefficients_give_grey_sky() {
        let img = background_image(&ShCoefficients::zeros(2).unwrap(), &camera());
        assert!(img.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn band_one_logits_are_odd_about_the_principal_point() {
        let mut c = ShCoefficients::zeros(2).unwrap();
        c.set(0, 3, 1.3); // −x
        c.set(0, 1, -0.4); // −y
        let cam = camera();
        let a = background_color(&c, &cam, 1, 2);
        let b = background_color(&c, &cam, 6, 5);
        let logit = |s: f64| (s / (1.0 - s)).ln();
        assert!((logit(a[0]) + logit(b[0])).abs() < 1e-12);
    }

    #[test]
    fn compositing_arithmetic() {
        let fg = Image::filled(1, 1, [0.2; 3]);
        let bg = Image::filled(1, 1, [0.8; 3]);
        let out = composite_buffers(&fg, &[0.25], &bg).unwrap();
        assert!((out.data()[0] - 0.8).abs() < 1e-15);
        let out = composite_buffers(&fg, &[1.0], &bg).unwrap();
        assert_eq!(out.data()[0], 0.2);
    }

    #[test]
    fn residual_mask_kernel_arithmetic() {
        let gt = Image::filled(5, 5, [0.5; 3]);
        let bg = Image::filled(5, 5, [0.5; 3]);
        let m = residual_mask(&gt, &bg, DEFAULT_THRESHOLD).unwrap();
        assert!(m.matches.iter().all(|v| *v));
        // interior pixels only: borders lose padded neighbours
        for y in 0..5 {
            for x in 0..5 {
                let interior = (1..4).contains(&x) && (1..4).contains(&y);
                assert_eq!(m.selected[y * 5 + x], interior || m.filtered[y * 5 + x] > 0.6);
            }
        }
        assert_eq!(m.filtered[12], 1.0);

        let mut bg = Image::filled(5, 5, [0.0; 3]);
        bg.set_pixel(2, 2, [0.5; 3]);
        let m = residual_mask(&gt, &bg, DEFAULT_THRESHOLD).unwrap();
        assert!((m.filtered[12] - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn alpha_loss_arithmetic() {
        let alpha = vec![0.2; 100];
        let mut sel = vec![false; 100];
        for s in sel.iter_mut().take(50) {
            *s = true;
        }
        let (loss, grad) = alpha_loss(&alpha, &sel, 0.01);
        assert!((loss - 0.1).abs() < 1e-12);
        assert_eq!(grad[0], 0.01);
        assert_eq!(grad[99], 0.0);
        let (loss, grad) = alpha_loss(&alpha, &[false; 100], 0.01);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }
}
