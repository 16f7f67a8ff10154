//! On-disk layout shared by scenes and checkpoints.
//!
//! A scene is a directory:
//!
//! ```text
//! scene.json              metadata (format version, counts, dimensions, cameras)
//! gaussians/means.bin     [N, 3]
//! gaussians/rotations.bin [N, 4]   quaternion (w, x, y, z)
//! gaussians/log_scales.bin[N, 3]
//! gaussians/opacity_logits.bin [N]
//! gaussians/features.bin  [N, 72]
//! images/0000.png …       8-bit sRGB, one per training image
//! ```
//!
//! Tensor blobs are little-endian:
//!
//! ```text
//! bytes 0..8   magic  b"WSPLTNSR"
//! u32          dtype  (1 = f32, 2 = f64)
//! u32          rank
//! u64 × rank   shape
//! data         row-major values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CameraView, GaussianCloud, SceneBundle, TrainImage};
use crate::buffer::Image;
use crate::{Error, Result, BACKGROUND_SH_DEGREE, COLOR_SH_DEGREE, FEATURE_DIM};

pub const TENSOR_MAGIC: &[u8; 8] = b"WSPLTNSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u32 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Writes one tensor blob.
pub fn write_tensor(path: &Path, shape: &[usize], data: &[f64], dtype: DType) -> Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::Dimension(format!(
            "shape {shape:?} does not hold {} values",
            data.len()
        )));
    }
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut bytes = Vec::with_capacity(16 + 8 * shape.len() + width * data.len());
    bytes.extend_from_slice(TENSOR_MAGIC);
    bytes.extend_from_slice(&dtype.code().to_le_bytes());
    bytes.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => data
            .iter()
            .for_each(|&v| bytes.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => data
            .iter()
            .for_each(|&v| bytes.extend_from_slice(&v.to_le_bytes())),
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads one tensor blob, returning its shape and values widened to f64.
pub fn read_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::load(path, e.to_string()))?;
    let truncated = || Error::load(path, "truncated tensor file");
    if bytes.len() < 16 {
        return Err(truncated());
    }
    if &bytes[..8] != TENSOR_MAGIC {
        return Err(Error::load(path, "bad tensor magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dtype = DType::from_code(u32_at(8))
        .ok_or_else(|| Error::load(path, format!("unknown dtype code {}", u32_at(8))))?;
    let rank = u32_at(12) as usize;
    let header = 16 + 8 * rank;
    if bytes.len() < header {
        return Err(truncated());
    }
    let shape: Vec<usize> = (0..rank)
        .map(|k| u64::from_le_bytes(bytes[16 + 8 * k..24 + 8 * k].try_into().unwrap()) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    if bytes.len() != header + count * width {
        return Err(truncated());
    }
    let body = &bytes[header..];
    let data: Vec<f64> = match dtype {
        DType::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::load(path, "non-finite values"));
    }
    Ok((shape, data))
}

/// Reads a tensor and checks its shape.
pub fn read_tensor_shaped(path: &Path, expected: &[usize]) -> Result<Vec<f64>> {
    let (shape, data) = read_tensor(path)?;
    if shape != expected {
        return Err(Error::Dimension(format!(
            "{} has shape {shape:?}, expected {expected:?}",
            path.display()
        )));
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub index: usize,
    pub file: String,
    pub camera: CameraView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetadata {
    pub format_version: u32,
    pub name: String,
    pub units: String,
    pub num_gaussians: usize,
    pub num_images: usize,
    pub feature_dim: usize,
    pub color_sh_degree: usize,
    pub background_sh_degree: usize,
    pub tensor_dtype: DType,
    pub images: Vec<ImageEntry>,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::load(path, e.to_string()))
}

fn gaussian_files(dir: &Path) -> [PathBuf; 5] {
    let g = dir.join("gaussians");
    [
        g.join("means.bin"),
        g.join("rotations.bin"),
        g.join("log_scales.bin"),
        g.join("opacity_logits.bin"),
        g.join("features.bin"),
    ]
}

/// Writes the cloud tensors under `dir/gaussians/`.
pub fn save_cloud(cloud: &GaussianCloud, dir: &Path, dtype: DType) -> Result<()> {
    create_dir(&dir.join("gaussians"))?;
    let n = cloud.len();
    let [means, rotations, scales, opacities, features] = gaussian_files(dir);
    write_tensor(&means, &[n, 3], &cloud.means, dtype)?;
    write_tensor(&rotations, &[n, 4], &cloud.rotations, dtype)?;
    write_tensor(&scales, &[n, 3], &cloud.log_scales, dtype)?;
    write_tensor(&opacities, &[n], &cloud.opacity_logits, dtype)?;
    write_tensor(&features, &[n, FEATURE_DIM], &cloud.features, dtype)?;
    Ok(())
}

pub fn load_cloud(dir: &Path, n: usize, feature_dim: usize) -> Result<GaussianCloud> {
    if feature_dim != FEATURE_DIM {
        return Err(Error::Dimension(format!(
            "feature dimension {feature_dim} (this build uses {FEATURE_DIM})"
        )));
    }
    let [means, rotations, scales, opacities, features] = gaussian_files(dir);
    let cloud = GaussianCloud {
        means: read_tensor_shaped(&means, &[n, 3])?,
        rotations: read_tensor_shaped(&rotations, &[n, 4])?,
        log_scales: read_tensor_shaped(&scales, &[n, 3])?,
        opacity_logits: read_tensor_shaped(&opacities, &[n])?,
        features: read_tensor_shaped(&features, &[n, FEATURE_DIM])?,
    };
    cloud.validate()?;
    Ok(cloud)
}

/// Writes `bundle` as a scene directory. Tensors are stored as f64 so that a
/// save/load round trip is bit-exact.
pub fn save_scene(bundle: &SceneBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    create_dir(dir)?;
    create_dir(&dir.join("images"))?;
    save_cloud(&bundle.cloud, dir, DType::F64)?;
    let mut images = Vec::with_capacity(bundle.images.len());
    for img in &bundle.images {
        let file = format!("images/{:04}.png", img.index);
        img.image.save_png(&dir.join(&file))?;
        images.push(ImageEntry {
            index: img.index,
            file,
            camera: img.camera.clone(),
        });
    }
    let meta = SceneMetadata {
        format_version: FORMAT_VERSION,
        name: bundle.name.clone(),
        units: bundle.units.clone(),
        num_gaussians: bundle.cloud.len(),
        num_images: bundle.images.len(),
        feature_dim: FEATURE_DIM,
        color_sh_degree: COLOR_SH_DEGREE,
        background_sh_degree: BACKGROUND_SH_DEGREE,
        tensor_dtype: DType::F64,
        images,
    };
    write_json(&dir.join("scene.json"), &meta)
}

pub fn read_scene_metadata(dir: &Path) -> Result<SceneMetadata> {
    let meta: SceneMetadata = read_json(&dir.join("scene.json"))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: meta.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if meta.images.len() != meta.num_images {
        return Err(Error::load(
            dir,
            format!(
                "metadata lists {} images but declares {}",
                meta.images.len(),
                meta.num_images
            ),
        ));
    }
    Ok(meta)
}

/// Loads and fully validates a scene directory.
pub fn load_scene(dir: &Path) -> Result<SceneBundle> {
    let meta = read_scene_metadata(dir)?;
    let cloud = load_cloud(dir, meta.num_gaussians, meta.feature_dim)?;
    let mut images = Vec::with_capacity(meta.num_images);
    for entry in &meta.images {
        let image = Image::load_png(&dir.join(&entry.file))?;
        let img = TrainImage {
            index: entry.index,
            image,
            camera: entry.camera.clone(),
        };
        img.validate().map_err(|e| Error::load(dir, e.to_string()))?;
        images.push(img);
    }
    let bundle = SceneBundle {
        name: meta.name,
        units: meta.units,
        cloud,
        images,
    };
    bundle.validate().map_err(|e| Error::load(dir, e.to_string()))?;
    Ok(bundle)
}

/// Loads a scene and returns a one-line summary, or the first validation error.
pub fn validate_scene_dir(dir: &Path) -> Result<String> {
    let bundle = load_scene(dir)?;
    Ok(format!(
        "scene '{}': {} Gaussians, {} images",
        bundle.name,
        bundle.cloud.len(),
        bundle.images.len()
    ))
}
