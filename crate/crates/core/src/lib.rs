//! In-the-wild Gaussian splatting on the CPU.
//!
//! The crate is organised the way a frame flows through the system:
//!
//! * [`sh`]: real spherical harmonics and sigmoid colour recovery.
//! * [`scene`]: Gaussians, cameras, images, on-disk formats, checkpoints and
//!   the synthetic scene generator.
//! * [`raster`]: tiled differentiable rasterizer (forward and backward).
//! * [`appearance`]: per-image embeddings + per-Gaussian features → SH colour.
//! * [`background`]: SH sky at infinity, compositing and the alpha loss.
//! * [`robust_mask`]: transient-occluder masking.
//! * [`metrics`]: PSNR and SSIM.
//! * [`trainer`]: losses, Adam, densification, evaluation protocol.

pub mod adam;
pub mod appearance;
pub mod background;
mod error;
pub mod buffer;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod raster;
pub mod robust_mask;
pub mod scene;
pub mod sh;
pub mod trainer;

pub use error::{Error, Result};

/// Per-image appearance embedding width.
pub const EMBEDDING_DIM: usize = 48;
/// Per-Gaussian appearance feature width.
pub const FEATURE_DIM: usize = 72;
/// SH degree of the per-Gaussian colour predicted by the appearance model.
pub const COLOR_SH_DEGREE: usize = 3;
/// SH degree of the background model.
pub const BACKGROUND_SH_DEGREE: usize = 2;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
