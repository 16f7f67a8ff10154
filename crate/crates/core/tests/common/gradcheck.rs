//! Finite-difference check of the full composite training loss.

use rand::Rng;
use wildsplat_core::appearance::{AppearanceModel, MLP_SIZES as APP_SIZES};
use wildsplat_core::background::{self, BackgroundModel, MLP_SIZES as BG_SIZES};
use wildsplat_core::buffer::Image;
use wildsplat_core::nn::Mlp;
use wildsplat_core::pipeline::Model;
use wildsplat_core::scene::CameraView;
use wildsplat_core::trainer::{composite_loss, loss, TrainConfig};
use wildsplat_core::EMBEDDING_DIM;

use super::{central_diff, random_cloud, relative_error, rng};

pub struct LossProblem {
    pub model: Model,
    pub embedding: Vec<f64>,
    pub camera: CameraView,
    pub target: Image,
    pub inliers: Vec<bool>,
    pub alpha_select: Vec<bool>,
    pub config: TrainConfig,
    /// D-SSIM target with outliers replaced by the unperturbed prediction.
    /// The replacement is detached in training, so it stays fixed here.
    pub dssim_target: Image,
}

/// Random problem with `n` Gaussians on a `size × size` image. Both networks
/// get random weights everywhere (the zero-initialized output layer would
/// make several gradients vanish identically).
pub fn random_problem(seed: u64, n: usize, size: usize) -> LossProblem {
    let mut r = rng(seed);
    let cloud = random_cloud(&mut r, n, 0.7, -1.3..-0.5);
    let mlp_params = |sizes: &[usize], r: &mut rand_chacha::ChaCha8Rng, scale: f64| {
        let len = Mlp::zeros(sizes).params().len();
        Mlp::from_params(sizes, (0..len).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
    };
    let app_mlp = mlp_params(&APP_SIZES, &mut r, 0.15);
    let bg_mlp = mlp_params(&BG_SIZES, &mut r, 0.3);
    let embeddings: Vec<f64> = (0..2 * EMBEDDING_DIM).map(|_| r.random_range(-0.5..0.5)).collect();
    let model = Model {
        cloud,
        appearance: AppearanceModel::from_parts(embeddings, app_mlp).unwrap(),
        background: Some(BackgroundModel::from_mlp(bg_mlp).unwrap()),
    };
    let f = 0.5 * size as f64 / 25f64.to_radians().tan();
    let camera = CameraView::look_at([0.3, -0.4, -3.5], [0.0; 3], [0.0, -1.0, 0.0], f, size, size).unwrap();
    let target = Image::from_vec(size, size, (0..3 * size * size).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
    let inliers: Vec<bool> = (0..size * size).map(|_| r.random_bool(0.8)).collect();
    let alpha_select = (0..size * size).map(|_| r.random_bool(0.5)).collect();
    let embedding = model.appearance.embedding(1).to_vec();
    let base = model.forward_view(&embedding, &camera).unwrap().image;
    let dssim_target = loss::replace_outliers(&target, &base, &inliers);
    LossProblem {
        embedding,
        model,
        camera,
        target,
        inliers,
        alpha_select,
        config: TrainConfig::default(),
        dssim_target,
    }
}

impl LossProblem {
    /// `(1 − λs) L1_W + λs D-SSIM + λ Σ α`, assembled from the individual terms.
    pub fn loss(&self, model: &Model, embedding: &[f64]) -> f64 {
        let fwd = model.forward_view(embedding, &self.camera).unwrap();
        let ls = self.config.lambda_ssim;
        let (l1, _) = loss::masked_l1(&fwd.image, &self.target, &self.inliers).unwrap();
        let (ds, _) = loss::dssim(&fwd.image, &self.dssim_target).unwrap();
        let (la, _) = background::alpha_loss(&fwd.raster.alpha, &self.alpha_select, self.config.lambda_alpha);
        (1.0 - ls) * l1 + ls * ds + la
    }
}

/// Per parameter class: `(name, relative error, entries checked)`.
/// Network weights are checked on `mlp_samples` random entries per network.
pub fn composite_loss_gradcheck(seed: u64, n: usize, size: usize, mlp_samples: usize) -> Vec<(&'static str, f64, usize)> {
    let p = random_problem(seed, n, size);
    let fwd = p.model.forward_view(&p.embedding, &p.camera).unwrap();
    let l = composite_loss(&fwd.image, &p.target, &fwd.raster.alpha, &p.inliers, Some(&p.alpha_select), &p.config).unwrap();
    assert!((l.total - p.loss(&p.model, &p.embedding)).abs() < 1e-14);
    let g = p.model.backward_view(&fwd, &p.camera, &l.d_image, l.d_alpha.as_deref());
    let step = 1e-6;
    let mut r = rng(seed ^ 0x5eed);
    let mut out = Vec::new();

    type Access = fn(&mut Model) -> &mut [f64];
    let classes: [(&'static str, Access, &[f64]); 5] = [
        ("means", |m| &mut m.cloud.means[..], &g.means),
        ("rotations", |m| &mut m.cloud.rotations[..], &g.rotations),
        ("log_scales", |m| &mut m.cloud.log_scales[..], &g.log_scales),
        ("opacity_logits", |m| &mut m.cloud.opacity_logits[..], &g.opacity_logits),
        ("features", |m| &mut m.cloud.features[..], &g.features),
    ];
    for (name, access, analytic) in classes {
        let mut model = p.model.clone();
        let len = access(&mut model).len();
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let orig = access(&mut model)[i];
            let eval = |v: f64, model: &mut Model| {
                access(model)[i] = v;
                p.loss(model, &p.embedding)
            };
            let hi = eval(orig + step, &mut model);
            let lo = eval(orig - step, &mut model);
            access(&mut model)[i] = orig;
            numeric.push((hi - lo) / (2.0 * step));
        }
        out.push((name, relative_error(analytic, &numeric), len));
    }

    let mut emb = p.embedding.clone();
    let numeric: Vec<f64> = (0..emb.len())
        .map(|i| central_diff(&mut emb, i, step, |e| p.loss(&p.model, e)))
        .collect();
    out.push(("embedding", relative_error(&g.embedding, &numeric), numeric.len()));

    let sample = |len: usize, r: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        rand::seq::index::sample(r, len, mlp_samples.min(len)).into_vec()
    };
    let mut model = p.model.clone();
    let idx = sample(model.appearance.mlp().params().len(), &mut r);
    let mut numeric = Vec::new();
    for &i in &idx {
        let orig = model.appearance.mlp().params()[i];
        model.appearance.mlp_mut().params_mut()[i] = orig + step;
        let hi = p.loss(&model, &p.embedding);
        model.appearance.mlp_mut().params_mut()[i] = orig - step;
        let lo = p.loss(&model, &p.embedding);
        model.appearance.mlp_mut().params_mut()[i] = orig;
        numeric.push((hi - lo) / (2.0 * step));
    }
    let analytic: Vec<f64> = idx.iter().map(|&i| g.appearance_mlp[i]).collect();
    out.push(("appearance_mlp", relative_error(&analytic, &numeric), idx.len()));

    let bg_grad = g.background_mlp.as_ref().expect("background enabled");
    let idx = sample(bg_grad.len(), &mut r);
    let mut numeric = Vec::new();
    fn bg(m: &mut Model) -> &mut [f64] {
        m.background.as_mut().unwrap().mlp_mut().params_mut()
    }
    for &i in &idx {
        let orig = bg(&mut model)[i];
        bg(&mut model)[i] = orig + step;
        let hi = p.loss(&model, &p.embedding);
        bg(&mut model)[i] = orig - step;
        let lo = p.loss(&model, &p.embedding);
        bg(&mut model)[i] = orig;
        numeric.push((hi - lo) / (2.0 * step));
    }
    let analytic: Vec<f64> = idx.iter().map(|&i| bg_grad[i]).collect();
    out.push(("background_mlp", relative_error(&analytic, &numeric), idx.len()));
    out
}
