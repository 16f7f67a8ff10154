//! Training loop: composite loss, Adam over every parameter group,
//! densification, checkpoints and the held-out evaluation protocol.

mod checkpoint;
mod densify;
mod eval;
pub mod loss;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::appearance::AppearanceModel;
use crate::background::{self, BackgroundModel};
use crate::buffer::Image;
use crate::pipeline::{Model, ViewForward};
use crate::robust_mask::{self, MaskConfig, MaskState};
use crate::scene::{SceneBundle, TrainImage};
use crate::{metrics, Error, Result, EMBEDDING_DIM, FEATURE_DIM};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use densify::{densify_and_prune, DensifyOutcome};
pub use eval::{evaluate, EvalRow, EvalTable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    /// Initial and final position rates, multiplied by the scene extent and
    /// interpolated exponentially over the run.
    pub means: f64,
    pub means_final: f64,
    pub scales: f64,
    pub rotations: f64,
    pub opacities: f64,
    pub features: f64,
    pub embeddings: f64,
    pub appearance_mlp: f64,
    pub background_mlp: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            means: 1.6e-4,
            means_final: 1.6e-6,
            scales: 5e-3,
            rotations: 1e-3,
            opacities: 5e-2,
            features: 2.5e-3,
            embeddings: 1e-3,
            appearance_mlp: 1e-3,
            background_mlp: 1e-3,
        }
    }
}

impl LearningRates {
    /// Every rate set to zero.
    pub fn zero() -> Self {
        Self {
            means: 0.0,
            means_final: 0.0,
            scales: 0.0,
            rotations: 0.0,
            opacities: 0.0,
            features: 0.0,
            embeddings: 0.0,
            appearance_mlp: 0.0,
            background_mlp: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensifyConfig {
    pub interval: u64,
    pub start: u64,
    /// Densification stops after this fraction of the run.
    pub until_fraction: f64,
    /// Mean screen-space positional gradient (normalized device units) above
    /// which a Gaussian is cloned or split.
    pub grad_threshold: f64,
    /// Gaussians with base opacity below this are pruned.
    pub min_opacity: f64,
    pub max_gaussians: usize,
    /// Gaussians larger than this fraction of the scene extent are split, smaller ones cloned.
    pub percent_dense: f64,
    pub split_scale_divisor: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            start: 500,
            until_fraction: 0.5,
            grad_threshold: 2e-4,
            min_opacity: 0.005,
            max_gaussians: 200_000,
            percent_dense: 0.01,
            split_scale_divisor: 1.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub seed: u64,
    pub lambda_ssim: f64,
    pub lambda_alpha: f64,
    /// Residual cut of the background mask feeding the alpha loss.
    pub background_threshold: f64,
    pub alpha_warmup: u64,
    pub mask_warmup: u64,
    pub use_background: bool,
    pub use_mask: bool,
    pub mask: MaskConfig,
    pub lr: LearningRates,
    pub adam: AdamConfig,
    pub densify: DensifyConfig,
    /// Adam iterations and rate for fitting held-out embeddings.
    pub eval_iterations: usize,
    pub eval_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 65_000,
            seed: 0,
            lambda_ssim: 0.2,
            lambda_alpha: 1e-4,
            background_threshold: background::DEFAULT_THRESHOLD,
            alpha_warmup: 1500,
            mask_warmup: 500,
            use_background: true,
            use_mask: true,
            mask: MaskConfig::default(),
            lr: LearningRates::default(),
            adam: AdamConfig::default(),
            densify: DensifyConfig::default(),
            eval_iterations: 200,
            eval_lr: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        let lr = &self.lr;
        let rates = [
            lr.means,
            lr.means_final,
            lr.scales,
            lr.rotations,
            lr.opacities,
            lr.features,
            lr.embeddings,
            lr.appearance_mlp,
            lr.background_mlp,
        ];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Argument("learning rates must be finite and non-negative".into()));
        }
        if self.densify.interval == 0 {
            return Err(Error::Argument("densification interval must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_ssim) || self.lambda_alpha < 0.0 {
            return Err(Error::Argument("loss weights out of range".into()));
        }
        Ok(())
    }
}

/// Adam state for every parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub means: Adam,
    pub rotations: Adam,
    pub log_scales: Adam,
    pub opacity_logits: Adam,
    pub features: Adam,
    pub embeddings: Adam,
    pub appearance_mlp: Adam,
    pub background_mlp: Option<Adam>,
}

impl Optimizers {
    pub fn new(config: AdamConfig, model: &Model) -> Self {
        let n = model.cloud.len();
        Self {
            means: Adam::new(config, 3 * n),
            rotations: Adam::new(config, 4 * n),
            log_scales: Adam::new(config, 3 * n),
            opacity_logits: Adam::new(config, n),
            features: Adam::new(config, FEATURE_DIM * n),
            embeddings: Adam::new(config, model.appearance.embeddings.len()),
            appearance_mlp: Adam::new(config, model.appearance.mlp().params().len()),
            background_mlp: model
                .background
                .as_ref()
                .map(|b| Adam::new(config, b.mlp().params().len())),
        }
    }

    pub(crate) fn gaussian_groups(&mut self) -> [(&mut Adam, usize); 5] {
        [
            (&mut self.means, 3),
            (&mut self.rotations, 4),
            (&mut self.log_scales, 3),
            (&mut self.opacity_logits, 1),
            (&mut self.features, FEATURE_DIM),
        ]
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: u64,
    pub image: usize,
    pub loss: f64,
    /// Unmasked mean L1 of the composited frame.
    pub l1_unmasked: f64,
    pub l1: f64,
    pub dssim: f64,
    pub alpha_loss: f64,
    /// Outlier fraction `k` used for this image, when masking was active.
    pub mask_fraction: Option<f64>,
    pub inlier_fraction: f64,
    pub alpha_pixels: usize,
    pub psnr: f64,
    pub num_gaussians: usize,
    pub densify: Option<DensifyOutcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed steps.
    pub iteration: u64,
    pub scene_name: String,
    pub units: String,
    pub images: Vec<TrainImage>,
    pub model: Model,
    pub mask: MaskState,
    pub optim: Optimizers,
    pub grad_accum: Vec<f64>,
    pub grad_count: Vec<f64>,
    pub extent: f64,
    rng: ChaCha8Rng,
    epoch: Vec<usize>,
    epoch_pos: usize,
    /// Where to write diagnostics if a step produces a non-finite loss.
    pub dump_dir: Option<PathBuf>,
    pub mask_dump: Option<MaskDump>,
}

/// Writes the robust mask of the current image as a PNG every `every` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskDump {
    pub dir: PathBuf,
    pub every: u64,
}

impl TrainState {
    /// Fresh state: new networks and embeddings, the bundle's cloud as the
    /// starting point.
    pub fn new(bundle: SceneBundle, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        bundle.validate()?;
        if bundle.images.is_empty() {
            return Err(Error::Argument("training needs at least one image".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let appearance = AppearanceModel::new(bundle.images.len(), &mut rng);
        let background = config.use_background.then(|| BackgroundModel::new(&mut rng));
        let extent = bundle.camera_extent();
        let model = Model {
            cloud: bundle.cloud,
            appearance,
            background,
        };
        let optim = Optimizers::new(config.adam, &model);
        let n = model.cloud.len();
        let num_images = bundle.images.len();
        Ok(Self {
            mask: MaskState::new(config.mask, num_images),
            config,
            iteration: 0,
            scene_name: bundle.name,
            units: bundle.units,
            images: bundle.images,
            model,
            optim,
            grad_accum: vec![0.0; n],
            grad_count: vec![0.0; n],
            extent,
            rng,
            epoch: Vec::new(),
            epoch_pos: 0,
            dump_dir: None,
            mask_dump: None,
        })
    }

    pub fn num_gaussians(&self) -> usize {
        self.model.cloud.len()
    }

    fn next_image(&mut self) -> usize {
        if self.epoch_pos >= self.epoch.len() {
            self.epoch = (0..self.images.len()).collect();
            self.epoch.shuffle(&mut self.rng);
            self.epoch_pos = 0;
        }
        let j = self.epoch[self.epoch_pos];
        self.epoch_pos += 1;
        j
    }

    /// Position learning rate at the current iteration.
    pub fn means_lr(&self) -> f64 {
        let lr = &self.config.lr;
        if lr.means <= 0.0 || lr.means_final <= 0.0 {
            return lr.means * self.extent;
        }
        let t = (self.iteration as f64 / self.config.iterations.max(1) as f64).clamp(0.0, 1.0);
        (lr.means.ln() * (1.0 - t) + lr.means_final.ln() * t).exp() * self.extent
    }

    /// Runs one step on the next image of the shuffled epoch.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let j = self.next_image();
        self.train_step_on(j)
    }

    /// Computes the loss terms of a frame for image `j` at the current
    /// iteration, without touching any state.
    pub fn frame_loss(&self, j: usize, fwd: &ViewForward, k: Option<f64>) -> Result<FrameLoss> {
        let cfg = &self.config;
        let target = &self.images[j].image;
        let (w, h) = (target.width(), target.height());
        let residual = robust_mask::residual_field(fwd.image.data(), target.data());
        let l1_unmasked = residual.iter().sum::<f64>() / residual.len().max(1) as f64;
        let inliers = match k {
            Some(k) => robust_mask::build_mask(&residual, k, w, h, &cfg.mask),
            None => vec![true; w * h],
        };
        let alpha_select = match (&fwd.background, self.alpha_active()) {
            (Some(bg), true) => Some(background::residual_mask(target, &bg.image, cfg.background_threshold)?.selected),
            _ => None,
        };
        composite_loss(&fwd.image, target, &fwd.raster.alpha, &inliers, alpha_select.as_deref(), cfg)
            .map(|mut l| {
                l.l1_unmasked = l1_unmasked;
                l
            })
    }

    fn mask_active(&self) -> bool {
        self.config.use_mask && self.iteration >= self.config.mask_warmup
    }

    fn alpha_active(&self) -> bool {
        self.config.use_background && self.config.lambda_alpha > 0.0 && self.iteration >= self.config.alpha_warmup
    }

    /// One optimization step on image `j`.
    pub fn train_step_on(&mut self, j: usize) -> Result<StepReport> {
        let camera = self.images[j].camera.clone();
        let embedding = self.model.appearance.embedding(j).to_vec();
        let fwd = self.model.forward_view(&embedding, &camera)?;

        let target = &self.images[j].image;
        let residual = robust_mask::residual_field(fwd.image.data(), target.data());
        let l1_unmasked = residual.iter().sum::<f64>() / residual.len().max(1) as f64;
        let psnr = metrics::psnr(&fwd.image, target)?;
        if l1_unmasked.is_finite() {
            self.mask.update_stats(j, l1_unmasked);
        }
        let k = self.mask_active().then(|| self.mask.mask_fraction(j));
        if let (Some(k), Some(dump)) = (k, &self.mask_dump) {
            if dump.every > 0 && self.iteration % dump.every == 0 {
                let (w, h) = (target.width(), target.height());
                let inliers = robust_mask::build_mask(&residual, k, w, h, &self.config.mask);
                std::fs::create_dir_all(&dump.dir).map_err(|e| Error::io(&dump.dir, e))?;
                let path = dump.dir.join(format!("mask_{:06}_{j:04}.png", self.iteration));
                crate::buffer::save_mask_png(&path, w, h, &inliers)?;
            }
        }
        let loss = self.frame_loss(j, &fwd, k)?;
        if !loss.total.is_finite() {
            return Err(self.non_finite(j, &fwd, &loss));
        }

        let grads = self
            .model
            .backward_view(&fwd, &camera, &loss.d_image, loss.d_alpha.as_deref());
        self.apply_gradients(j, &grads);

        // densification statistics
        for (i, &v) in grads.visible.iter().enumerate() {
            if v {
                self.grad_accum[i] += grads.screen_norm[i];
                self.grad_count[i] += 1.0;
            }
        }
        self.iteration += 1;
        let d = &self.config.densify;
        let until = (d.until_fraction * self.config.iterations as f64) as u64;
        let densify = if self.iteration >= d.start && self.iteration <= until && self.iteration % d.interval == 0 {
            Some(densify_and_prune(self))
        } else {
            None
        };

        Ok(StepReport {
            iteration: self.iteration,
            image: j,
            loss: loss.total,
            l1_unmasked,
            l1: loss.l1,
            dssim: loss.dssim,
            alpha_loss: loss.alpha,
            mask_fraction: k,
            inlier_fraction: loss.inlier_fraction,
            alpha_pixels: loss.alpha_pixels,
            psnr,
            num_gaussians: self.model.cloud.len(),
            densify,
        })
    }

    fn apply_gradients(&mut self, j: usize, g: &crate::pipeline::ModelGrads) {
        let lr = self.config.lr;
        let means_lr = self.means_lr();
        let cloud = &mut self.model.cloud;
        let o = &mut self.optim;
        o.means.update(&mut cloud.means, &g.means, means_lr);
        o.rotations.update(&mut cloud.rotations, &g.rotations, lr.rotations);
        o.log_scales.update(&mut cloud.log_scales, &g.log_scales, lr.scales);
        o.opacity_logits.update(&mut cloud.opacity_logits, &g.opacity_logits, lr.opacities);
        o.features.update(&mut cloud.features, &g.features, lr.features);

        let mut emb_grad = vec![0.0; self.model.appearance.embeddings.len()];
        emb_grad[j * EMBEDDING_DIM..(j + 1) * EMBEDDING_DIM].copy_from_slice(&g.embedding);
        o.embeddings
            .update(&mut self.model.appearance.embeddings, &emb_grad, lr.embeddings);
        o.appearance_mlp.update(
            self.model.appearance.mlp_mut().params_mut(),
            &g.appearance_mlp,
            lr.appearance_mlp,
        );
        if let (Some(bg), Some(adam), Some(grad)) = (
            self.model.background.as_mut(),
            o.background_mlp.as_mut(),
            g.background_mlp.as_ref(),
        ) {
            adam.update(bg.mlp_mut().params_mut(), grad, lr.background_mlp);
        }
        self.model.appearance.invalidate();
    }

    fn non_finite(&self, j: usize, fwd: &ViewForward, loss: &FrameLoss) -> Error {
        let bad_pixels = fwd.image.data().iter().filter(|v| !v.is_finite()).count();
        let mut msg = format!(
            "loss at iteration {} on image {j}: l1={} dssim={} alpha={}; {bad_pixels} non-finite rendered values",
            self.iteration, loss.l1, loss.dssim, loss.alpha
        );
        if let Some(dir) = &self.dump_dir {
            let written = (|| -> Result<()> {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let mut render = fwd.image.clone();
                render.data_mut().iter_mut().filter(|v| !v.is_finite()).for_each(|v| *v = 1.0);
                render.save_png(&dir.join("render.png"))?;
                self.images[j].image.save_png(&dir.join("target.png"))?;
                let alpha = Image::from_vec(
                    fwd.raster.width,
                    fwd.raster.height,
                    fwd.raster.alpha.iter().flat_map(|a| [*a; 3]).map(|a| if a.is_finite() { a } else { 1.0 }).collect(),
                )?;
                alpha.save_png(&dir.join("alpha.png"))?;
                save_checkpoint(self, &dir.join("state"))
            })();
            match written {
                Ok(()) => msg.push_str(&format!("; buffers written to {}", dir.display())),
                Err(e) => msg.push_str(&format!("; writing diagnostics failed: {e}")),
            }
        }
        Error::NonFinite(msg)
    }

    /// Runs `n` steps, handing each report to `on_step`.
    pub fn train(&mut self, n: u64, mut on_step: impl FnMut(&StepReport)) -> Result<()> {
        for _ in 0..n {
            let report = self.train_step()?;
            on_step(&report);
        }
        Ok(())
    }

    /// Training images as a bundle with the current cloud.
    pub fn bundle(&self) -> SceneBundle {
        SceneBundle {
            name: self.scene_name.clone(),
            units: self.units.clone(),
            cloud: self.model.cloud.clone(),
            images: self.images.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load_checkpoint(dir)
    }
}

/// Loss terms of one frame and the gradients they induce.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLoss {
    pub total: f64,
    pub l1_unmasked: f64,
    pub l1: f64,
    pub dssim: f64,
    pub alpha: f64,
    pub inlier_fraction: f64,
    pub alpha_pixels: usize,
    /// `∂total/∂frame`.
    pub d_image: Vec<f64>,
    /// `∂total/∂α` from the alpha loss.
    pub d_alpha: Option<Vec<f64>>,
}

/// `(1 − λ_ssim) L1_W + λ_ssim D-SSIM_W + λ Σ_{p_i} α` for a composited
/// frame with inlier mask `inliers` and alpha-loss pixels `alpha_select`.
pub fn composite_loss(
    pred: &Image,
    target: &Image,
    alpha: &[f64],
    inliers: &[bool],
    alpha_select: Option<&[bool]>,
    cfg: &TrainConfig,
) -> Result<FrameLoss> {
    let (l1, g1) = loss::masked_l1(pred, target, inliers)?;
    let (ds, gs) = if cfg.lambda_ssim > 0.0 {
        loss::masked_dssim(pred, target, inliers)?
    } else {
        (0.0, vec![0.0; pred.data().len()])
    };
    let ls = cfg.lambda_ssim;
    let d_image: Vec<f64> = g1.iter().zip(&gs).map(|(a, b)| (1.0 - ls) * a + ls * b).collect();
    let (alpha_loss, d_alpha, alpha_pixels) = match alpha_select {
        Some(sel) => {
            let (l, g) = background::alpha_loss(alpha, sel, cfg.lambda_alpha);
            (l, Some(g), sel.iter().filter(|s| **s).count())
        }
        None => (0.0, None, 0),
    };
    Ok(FrameLoss {
        total: (1.0 - ls) * l1 + ls * ds + alpha_loss,
        l1_unmasked: loss::l1(pred, target),
        l1,
        dssim: ds,
        alpha: alpha_loss,
        inlier_fraction: inliers.iter().filter(|v| **v).count() as f64 / inliers.len().max(1) as f64,
        alpha_pixels,
        d_image,
        d_alpha,
    })
}
