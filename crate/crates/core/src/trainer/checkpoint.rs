//! Training checkpoints. Every tensor is stored as f64 so that resuming
//! continues bit-for-bit where the saved run stopped.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Optimizers, TrainConfig, TrainState};
use crate::adam::Adam;
use crate::appearance::{self, AppearanceModel};
use crate::background::{self, BackgroundModel};
use crate::buffer::Image;
use crate::nn::Mlp;
use crate::pipeline::Model;
use crate::robust_mask::MaskState;
use crate::scene::format::{load_cloud, read_json, read_tensor_shaped, save_cloud, write_json, write_tensor, DType};
use crate::scene::{CameraView, TrainImage};
use crate::{Error, Result, EMBEDDING_DIM, FEATURE_DIM};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// u128 does not survive every JSON reader, so it is kept as a decimal string.
    word_pos: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamSteps {
    means: u64,
    rotations: u64,
    log_scales: u64,
    opacity_logits: u64,
    features: u64,
    embeddings: u64,
    appearance_mlp: u64,
    background_mlp: Option<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    iteration: u64,
    config: TrainConfig,
    scene_name: String,
    units: String,
    num_gaussians: usize,
    num_images: usize,
    feature_dim: usize,
    embedding_dim: usize,
    has_background: bool,
    cameras: Vec<CameraView>,
    image_indices: Vec<usize>,
    mask: MaskState,
    rng: RngState,
    epoch: Vec<usize>,
    epoch_pos: usize,
    adam_steps: AdamSteps,
    extent: f64,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn save_adam(dir: &Path, name: &str, adam: &Adam) -> Result<()> {
    let len = adam.m.len();
    write_tensor(&dir.join(format!("{name}_m.bin")), &[len], &adam.m, DType::F64)?;
    write_tensor(&dir.join(format!("{name}_v.bin")), &[len], &adam.v, DType::F64)
}

fn load_adam(dir: &Path, name: &str, template: &Adam, step: u64) -> Result<Adam> {
    let len = template.m.len();
    Ok(Adam {
        config: template.config,
        step,
        m: read_tensor_shaped(&dir.join(format!("{name}_m.bin")), &[len])?,
        v: read_tensor_shaped(&dir.join(format!("{name}_v.bin")), &[len])?,
    })
}

/// Writes the complete training state to `dir`.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for sub in ["model", "optim", "train", "images"] {
        create_dir(&dir.join(sub))?;
    }
    let model = &state.model;
    save_cloud(&model.cloud, dir, DType::F64)?;
    let app = &model.appearance;
    write_tensor(
        &dir.join("model/embeddings.bin"),
        &[app.num_images(), EMBEDDING_DIM],
        &app.embeddings,
        DType::F64,
    )?;
    let mlp = app.mlp().params();
    write_tensor(&dir.join("model/appearance_mlp.bin"), &[mlp.len()], mlp, DType::F64)?;
    if let Some(bg) = &model.background {
        let p = bg.mlp().params();
        write_tensor(&dir.join("model/background_mlp.bin"), &[p.len()], p, DType::F64)?;
    }

    let o = &state.optim;
    let optim = dir.join("optim");
    save_adam(&optim, "means", &o.means)?;
    save_adam(&optim, "rotations", &o.rotations)?;
    save_adam(&optim, "log_scales", &o.log_scales)?;
    save_adam(&optim, "opacity_logits", &o.opacity_logits)?;
    save_adam(&optim, "features", &o.features)?;
    save_adam(&optim, "embeddings", &o.embeddings)?;
    save_adam(&optim, "appearance_mlp", &o.appearance_mlp)?;
    if let Some(a) = &o.background_mlp {
        save_adam(&optim, "background_mlp", a)?;
    }

    let n = model.cloud.len();
    write_tensor(&dir.join("train/grad_accum.bin"), &[n], &state.grad_accum, DType::F64)?;
    write_tensor(&dir.join("train/grad_count.bin"), &[n], &state.grad_count, DType::F64)?;
    for (j, img) in state.images.iter().enumerate() {
        write_tensor(
            &dir.join(format!("images/{j:04}.bin")),
            &[img.image.height(), img.image.width(), 3],
            img.image.data(),
            DType::F64,
        )?;
    }

    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        iteration: state.iteration,
        config: state.config.clone(),
        scene_name: state.scene_name.clone(),
        units: state.units.clone(),
        num_gaussians: n,
        num_images: state.images.len(),
        feature_dim: FEATURE_DIM,
        embedding_dim: EMBEDDING_DIM,
        has_background: model.background.is_some(),
        cameras: state.images.iter().map(|i| i.camera.clone()).collect(),
        image_indices: state.images.iter().map(|i| i.index).collect(),
        mask: state.mask.clone(),
        rng: RngState {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        epoch: state.epoch.clone(),
        epoch_pos: state.epoch_pos,
        adam_steps: AdamSteps {
            means: o.means.step,
            rotations: o.rotations.step,
            log_scales: o.log_scales.step,
            opacity_logits: o.opacity_logits.step,
            features: o.features.step,
            embeddings: o.embeddings.step,
            appearance_mlp: o.appearance_mlp.step,
            background_mlp: o.background_mlp.as_ref().map(|a| a.step),
        },
        extent: state.extent,
    };
    write_json(&dir.join("checkpoint.json"), &meta)
}

/// Restores a state written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let meta: CheckpointMeta = read_json(&dir.join("checkpoint.json"))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: meta.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if meta.embedding_dim != EMBEDDING_DIM {
        return Err(Error::Dimension(format!(
            "embedding dimension {} (this build uses {EMBEDDING_DIM})",
            meta.embedding_dim
        )));
    }
    if meta.cameras.len() != meta.num_images || meta.image_indices.len() != meta.num_images {
        return Err(Error::load(dir, "camera list does not match the image count"));
    }
    meta.config.validate()?;
    let n = meta.num_gaussians;
    let cloud = load_cloud(dir, n, meta.feature_dim)?;
    let embeddings = read_tensor_shaped(&dir.join("model/embeddings.bin"), &[meta.num_images, EMBEDDING_DIM])?;
    let app_len = Mlp::zeros(&appearance::MLP_SIZES).params().len();
    let app_mlp = Mlp::from_params(
        &appearance::MLP_SIZES,
        read_tensor_shaped(&dir.join("model/appearance_mlp.bin"), &[app_len])?,
    )?;
    let background = if meta.has_background {
        let len = Mlp::zeros(&background::MLP_SIZES).params().len();
        let mlp = Mlp::from_params(
            &background::MLP_SIZES,
            read_tensor_shaped(&dir.join("model/background_mlp.bin"), &[len])?,
        )?;
        Some(BackgroundModel::from_mlp(mlp)?)
    } else {
        None
    };
    let model = Model {
        cloud,
        appearance: AppearanceModel::from_parts(embeddings, app_mlp)?,
        background,
    };

    let template = Optimizers::new(meta.config.adam, &model);
    let optim_dir = dir.join("optim");
    let s = &meta.adam_steps;
    let background_mlp = match (&template.background_mlp, s.background_mlp) {
        (Some(t), Some(step)) => Some(load_adam(&optim_dir, "background_mlp", t, step)?),
        (None, None) => None,
        _ => return Err(Error::load(dir, "background optimizer state does not match the model")),
    };
    let optim = Optimizers {
        means: load_adam(&optim_dir, "means", &template.means, s.means)?,
        rotations: load_adam(&optim_dir, "rotations", &template.rotations, s.rotations)?,
        log_scales: load_adam(&optim_dir, "log_scales", &template.log_scales, s.log_scales)?,
        opacity_logits: load_adam(&optim_dir, "opacity_logits", &template.opacity_logits, s.opacity_logits)?,
        features: load_adam(&optim_dir, "features", &template.features, s.features)?,
        embeddings: load_adam(&optim_dir, "embeddings", &template.embeddings, s.embeddings)?,
        appearance_mlp: load_adam(&optim_dir, "appearance_mlp", &template.appearance_mlp, s.appearance_mlp)?,
        background_mlp,
    };

    let mut images = Vec::with_capacity(meta.num_images);
    for (j, camera) in meta.cameras.into_iter().enumerate() {
        let (w, h) = (camera.width, camera.height);
        let data = read_tensor_shaped(&dir.join(format!("images/{j:04}.bin")), &[h, w, 3])?;
        let img = TrainImage {
            index: meta.image_indices[j],
            image: Image::from_vec(w, h, data)?,
            camera,
        };
        img.validate()?;
        images.push(img);
    }
    if meta.mask.stats.len() != images.len() {
        return Err(Error::load(dir, "mask statistics do not match the image count"));
    }
    if meta.epoch_pos > meta.epoch.len() || meta.epoch.iter().any(|&j| j >= images.len()) {
        return Err(Error::load(dir, "corrupt epoch order"));
    }

    let word_pos: u128 = meta
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::load(dir, "corrupt random generator position"))?;
    let mut rng = ChaCha8Rng::from_seed(meta.rng.seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(word_pos);

    Ok(TrainState {
        config: meta.config,
        iteration: meta.iteration,
        scene_name: meta.scene_name,
        units: meta.units,
        images,
        model,
        mask: meta.mask,
        optim,
        grad_accum: read_tensor_shaped(&dir.join("train/grad_accum.bin"), &[n])?,
        grad_count: read_tensor_shaped(&dir.join("train/grad_count.bin"), &[n])?,
        extent: meta.extent,
        rng,
        epoch: meta.epoch,
        epoch_pos: meta.epoch_pos,
        dump_dir: None,
        mask_dump: None,
    })
}
