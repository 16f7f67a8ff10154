//! Full frame formation: appearance colours → rasterization → background
//! compositing, and the matching reverse pass.

use crate::adam::{Adam, AdamConfig};
use crate::appearance::{self, AppearanceForward, AppearanceModel, CachedAppearance};
use crate::background::{self, BackgroundForward, BackgroundModel};
use crate::buffer::Image;
use crate::metrics;
use crate::raster::{self, RenderOutput};
use crate::scene::{CameraView, GaussianCloud};
use crate::sh::ShCoefficients;
use crate::{Error, Result};

/// Everything needed to render: the Gaussians and both networks. Without a
/// background model frames are composited over black.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cloud: GaussianCloud,
    pub appearance: AppearanceModel,
    pub background: Option<BackgroundModel>,
}

/// Live forward state of one frame.
#[derive(Clone, Debug)]
pub struct ViewForward {
    pub appearance: AppearanceForward,
    pub raster: RenderOutput,
    pub background: Option<BackgroundForward>,
    /// Composited frame.
    pub image: Image,
}

/// Gradients of a scalar loss with respect to every trainable quantity
/// touched by one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub means: Vec<f64>,
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub features: Vec<f64>,
    pub embedding: Vec<f64>,
    pub appearance_mlp: Vec<f64>,
    pub background_mlp: Option<Vec<f64>>,
    /// Screen-space positional gradient norm per Gaussian (densification).
    pub screen_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

/// Ready-to-render appearance for one embedding: the cached colour
/// coefficients and the background coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCache {
    pub appearance: CachedAppearance,
    pub background: Option<ShCoefficients>,
}

impl Model {
    pub fn num_images(&self) -> usize {
        self.appearance.num_images()
    }

    fn background_image(&self, coeffs: Option<&ShCoefficients>, camera: &CameraView) -> Image {
        match coeffs {
            Some(c) => background::background_image(c, camera),
            None => Image::new(camera.width, camera.height),
        }
    }

    /// Live path, retaining activations for [`Model::backward_view`].
    pub fn forward_view(&self, embedding: &[f64], camera: &CameraView) -> Result<ViewForward> {
        let rows = raster::visible_gaussians(&self.cloud, camera);
        let app = self.appearance.forward(embedding, &self.cloud, camera, rows)?;
        let raster_out = raster::render(&self.cloud, &app.colors, camera);
        let bg = match &self.background {
            Some(b) => Some(b.forward(embedding, camera)?),
            None => None,
        };
        let bg_image = match &bg {
            Some(f) => f.image.clone(),
            None => Image::new(camera.width, camera.height),
        };
        let image = background::composite(&raster_out, &bg_image)?;
        Ok(ViewForward {
            appearance: app,
            raster: raster_out,
            background: bg,
            image,
        })
    }

    /// Reverse pass given `∂L/∂frame` and an extra `∂L/∂α` (e.g. the alpha loss).
    pub fn backward_view(
        &self,
        fwd: &ViewForward,
        camera: &CameraView,
        d_image: &[f64],
        d_alpha_extra: Option<&[f64]>,
    ) -> ModelGrads {
        let npx = camera.width * camera.height;
        assert_eq!(d_image.len(), 3 * npx);
        let bg_data = fwd.background.as_ref().map(|b| b.image.data());
        let mut d_alpha = match d_alpha_extra {
            Some(a) => {
                assert_eq!(a.len(), npx);
                a.to_vec()
            }
            None => vec![0.0; npx],
        };
        let mut d_bg = vec![0.0; 3 * npx];
        if let Some(bg) = bg_data {
            for p in 0..npx {
                let t = 1.0 - fwd.raster.alpha[p];
                for c in 0..3 {
                    d_alpha[p] -= d_image[3 * p + c] * bg[3 * p + c];
                    d_bg[3 * p + c] = d_image[3 * p + c] * t;
                }
            }
        }
        let screen = raster::render_backward(&fwd.raster, d_image, &d_alpha);
        let cg = raster::cloud_backward(&self.cloud, camera, &fwd.raster, &screen);
        let ag = self.appearance.backward(&fwd.appearance, &self.cloud, &cg.colors);
        let mut embedding = ag.embedding;
        let background_mlp = match (&self.background, &fwd.background) {
            (Some(model), Some(bf)) => {
                let (d_mlp, d_emb) = model.backward(bf, camera, &d_bg);
                for (e, d) in embedding.iter_mut().zip(&d_emb) {
                    *e += d;
                }
                Some(d_mlp)
            }
            _ => None,
        };
        let mut means = cg.means;
        for (m, d) in means.iter_mut().zip(&ag.means) {
            *m += d;
        }
        ModelGrads {
            means,
            rotations: cg.rotations,
            log_scales: cg.log_scales,
            opacity_logits: cg.opacity_logits,
            features: ag.features,
            embedding,
            appearance_mlp: ag.mlp,
            background_mlp,
            screen_norm: cg.screen_norm,
            visible: cg.visible,
        }
    }

    /// Live render (MLP evaluated for this frame).
    pub fn render_live(&self, embedding: &[f64], camera: &CameraView) -> Result<Image> {
        Ok(self.forward_view(embedding, camera)?.image)
    }

    /// One MLP batch for the colour table, one evaluation of the background
    /// network; the result renders any camera.
    pub fn build_cache(&self, embedding: &[f64]) -> Result<FrameCache> {
        let appearance = self.appearance.build_cache(embedding, &self.cloud)?;
        let background = match &self.background {
            Some(b) => Some(b.predict(embedding)?),
            None => None,
        };
        Ok(FrameCache {
            appearance,
            background,
        })
    }

    /// Renders from a cache and returns the foreground pass alongside the frame.
    pub fn render_cached_full(&self, cache: &FrameCache, camera: &CameraView) -> Result<(Image, RenderOutput)> {
        let colors = appearance::cached_colors(&self.appearance, &cache.appearance, &self.cloud, camera)?;
        let out = raster::render(&self.cloud, &colors, camera);
        let bg = self.background_image(cache.background.as_ref(), camera);
        Ok((background::composite(&out, &bg)?, out))
    }

    pub fn render_cached(&self, cache: &FrameCache, camera: &CameraView) -> Result<Image> {
        Ok(self.render_cached_full(cache, camera)?.0)
    }

    /// Renders training image `j`'s appearance through the cache path.
    pub fn render_image_appearance(&self, j: usize, camera: &CameraView) -> Result<Image> {
        if j >= self.num_images() {
            return Err(Error::Argument(format!(
                "appearance index {j} out of range (scene has {} images)",
                self.num_images()
            )));
        }
        let cache = self.build_cache(self.appearance.embedding(j))?;
        self.render_cached(&cache, camera)
    }
}

/// Result of fitting an embedding to part of a held-out image.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFit {
    pub embedding: Vec<f64>,
    /// `(left PSNR, right PSNR)` before the first step and after every step.
    pub trace: Vec<(f64, f64)>,
}

/// Optimizes a fresh embedding against the left half (`[0, ⌊W/2⌋)`) of
/// `target` with every model parameter frozen. Starts from the mean
/// training embedding and minimizes L1 with Adam.
pub fn optimize_test_embedding(
    model: &Model,
    target: &Image,
    camera: &CameraView,
    iterations: usize,
    lr: f64,
) -> Result<EmbeddingFit> {
    if target.width() != camera.width || target.height() != camera.height {
        return Err(Error::Dimension("test image does not match its camera".into()));
    }
    let (w, h) = (camera.width, camera.height);
    let split = w / 2;
    let mut embedding = model.appearance.mean_embedding();
    let mut adam = Adam::new(AdamConfig::default(), embedding.len());
    let halves = |img: &Image| -> Result<(f64, f64)> {
        Ok((
            metrics::psnr(&img.crop_columns(0, split), &target.crop_columns(0, split))?,
            metrics::psnr(&img.crop_columns(split, w), &target.crop_columns(split, w))?,
        ))
    };
    let mut trace = Vec::with_capacity(iterations + 1);
    let mut fwd = model.forward_view(&embedding, camera)?;
    trace.push(halves(&fwd.image)?);
    let count = (3 * split * h).max(1) as f64;
    for _ in 0..iterations {
        let mut d_image = vec![0.0; 3 * w * h];
        for y in 0..h {
            for x in 0..split {
                let p = y * w + x;
                for c in 0..3 {
                    let diff = fwd.image.data()[3 * p + c] - target.data()[3 * p + c];
                    d_image[3 * p + c] = diff.signum() * (diff != 0.0) as u8 as f64 / count;
                }
            }
        }
        let grads = model.backward_view(&fwd, camera, &d_image, None);
        adam.update(&mut embedding, &grads.embedding, lr);
        fwd = model.forward_view(&embedding, camera)?;
        trace.push(halves(&fwd.image)?);
    }
    Ok(EmbeddingFit { embedding, trace })
}
