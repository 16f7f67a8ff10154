//! Immutable published scenes and the render path over them.

use std::hash::{Hash, Hasher};
use std::io::Cursor;
use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use image::codecs::jpeg::JpegEncoder;
use image::ImageFormat;
use lru::LruCache;
use wildsplat_core::buffer::Image;
use wildsplat_core::pipeline::{FrameCache, Model};
use wildsplat_core::scene::CameraView;
use wildsplat_core::trainer::TrainState;
use wildsplat_core::{BACKGROUND_SH_DEGREE, COLOR_SH_DEGREE, EMBEDDING_DIM};

use crate::protocol::{AppearanceSpec, CatalogImage, Encoding, RenderRequest, SceneInfo, INTERP_STEPS, PROTOCOL_VERSION};
use crate::ServiceError;

pub const DEFAULT_CACHE_CAPACITY: usize = 16;
pub const THUMBNAIL_SIZE: usize = 128;
pub const JPEG_QUALITY: u8 = 90;
/// Largest frame edge a request may ask for.
pub const MAX_FRAME_SIZE: usize = 4096;

/// Cache key of a resolved appearance. Interpolation weights are stored in
/// 1/256 steps; raw vectors by their bit patterns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CacheKey {
    Image(usize),
    Interp(usize, usize, u16),
    Raw(Vec<u64>),
}

impl Hash for CacheKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::mem::discriminant(self).hash(state);
        match self {
            CacheKey::Image(j) => j.hash(state),
            CacheKey::Interp(a, b, q) => (a, b, q).hash(state),
            CacheKey::Raw(bits) => bits.hash(state),
        }
    }
}

/// A training image as shown in the catalog.
#[derive(Clone, Debug)]
pub struct CatalogEntry {
    pub camera: CameraView,
    pub thumbnail: Image,
}

/// A published model. The model never changes after construction; the
/// appearance cache only ever holds `build_cache` results of this model.
pub struct Snapshot {
    pub version: u64,
    pub name: String,
    pub model: Model,
    pub catalog: Vec<CatalogEntry>,
    cache: Mutex<LruCache<CacheKey, Arc<FrameCache>>>,
}

/// Encoded frame plus timing.
#[derive(Clone, Debug)]
pub struct RenderedFrame {
    pub bytes: Vec<u8>,
    pub encoding: Encoding,
    pub width: usize,
    pub height: usize,
    pub cache_hit: bool,
    pub cache_ms: f64,
    pub raster_ms: f64,
    pub total_ms: f64,
    pub version: u64,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

impl Snapshot {
    pub fn new(version: u64, name: String, model: Model, catalog: Vec<CatalogEntry>, cache_capacity: usize) -> Self {
        let cap = NonZeroUsize::new(cache_capacity.max(1)).expect("nonzero");
        Self {
            version,
            name,
            model,
            catalog,
            cache: Mutex::new(LruCache::new(cap)),
        }
    }

    /// Snapshot of a training state, with thumbnails of its images.
    pub fn from_state(state: &TrainState, version: u64, cache_capacity: usize) -> Self {
        let catalog = state
            .images
            .iter()
            .map(|img| {
                let edge = img.image.width().max(img.image.height());
                CatalogEntry {
                    camera: img.camera.clone(),
                    thumbnail: img.image.downscale(edge.div_ceil(THUMBNAIL_SIZE)),
                }
            })
            .collect();
        Self::new(version, state.scene_name.clone(), state.model.clone(), catalog, cache_capacity)
    }

    pub fn info(&self) -> SceneInfo {
        SceneInfo {
            protocol: PROTOCOL_VERSION,
            name: self.name.clone(),
            version: self.version,
            num_gaussians: self.model.cloud.len(),
            num_images: self.model.num_images(),
            embedding_dim: EMBEDDING_DIM,
            color_sh_degree: COLOR_SH_DEGREE,
            background_sh_degree: self.model.background.as_ref().map(|_| BACKGROUND_SH_DEGREE),
            images: self
                .catalog
                .iter()
                .enumerate()
                .map(|(j, e)| CatalogImage {
                    index: j,
                    width: e.camera.width,
                    height: e.camera.height,
                    thumbnail: format!("/api/thumb/{j}"),
                    camera: e.camera.clone(),
                })
                .collect(),
        }
    }

    /// Cache key and embedding for an appearance request.
    pub fn resolve(&self, spec: &AppearanceSpec) -> Result<(CacheKey, Vec<f64>), ServiceError> {
        let n = self.model.num_images();
        let check = |j: usize| {
            if j < n {
                Ok(())
            } else {
                Err(ServiceError::Request(format!("appearance index {j} out of range (scene has {n} images)")))
            }
        };
        let app = &self.model.appearance;
        match spec {
            AppearanceSpec::Image { index } => {
                check(*index)?;
                Ok((CacheKey::Image(*index), app.embedding(*index).to_vec()))
            }
            AppearanceSpec::Interp { a, b, t } => {
                check(*a)?;
                check(*b)?;
                if !(0.0..=1.0).contains(t) {
                    return Err(ServiceError::Request(format!("interpolation weight {t} outside [0, 1]")));
                }
                let q = (t * INTERP_STEPS).round();
                let t = q / INTERP_STEPS;
                let e = app
                    .embedding(*a)
                    .iter()
                    .zip(app.embedding(*b))
                    .map(|(x, y)| (1.0 - t) * x + t * y)
                    .collect();
                Ok((CacheKey::Interp(*a, *b, q as u16), e))
            }
            AppearanceSpec::Raw { embedding } => {
                if embedding.len() != EMBEDDING_DIM {
                    return Err(ServiceError::Request(format!(
                        "raw embedding has {} entries, expected {EMBEDDING_DIM}",
                        embedding.len()
                    )));
                }
                if embedding.iter().any(|v| !v.is_finite()) {
                    return Err(ServiceError::Request("raw embedding is not finite".into()));
                }
                Ok((CacheKey::Raw(embedding.iter().map(|v| v.to_bits()).collect()), embedding.clone()))
            }
        }
    }

    /// Cached appearance for `spec`, building it on a miss. Returns whether
    /// it was a hit.
    pub fn frame_cache(&self, spec: &AppearanceSpec) -> Result<(Arc<FrameCache>, bool), ServiceError> {
        let (key, embedding) = self.resolve(spec)?;
        if let Some(c) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok((c.clone(), true));
        }
        // Built outside the lock; two racing misses both build, which is harmless.
        let built = Arc::new(self.model.build_cache(&embedding)?);
        self.cache.lock().expect("cache lock").put(key, built.clone());
        Ok((built, false))
    }

    pub fn cached_keys(&self) -> usize {
        self.cache.lock().expect("cache lock").len()
    }

    /// Renders a request to a linear image.
    pub fn render_image(&self, req: &RenderRequest) -> Result<(Image, bool, f64, f64), ServiceError> {
        let camera = output_camera(req)?;
        let t0 = Instant::now();
        let (cache, hit) = self.frame_cache(&req.appearance)?;
        let cache_ms = ms(t0);
        let t1 = Instant::now();
        let img = self.model.render_cached(&cache, &camera)?;
        Ok((img, hit, cache_ms, ms(t1)))
    }

    pub fn render_once(&self, req: &RenderRequest) -> Result<RenderedFrame, ServiceError> {
        let t0 = Instant::now();
        let (img, cache_hit, cache_ms, raster_ms) = self.render_image(req)?;
        let bytes = encode(&img, req.encoding)?;
        Ok(RenderedFrame {
            bytes,
            encoding: req.encoding,
            width: img.width(),
            height: img.height(),
            cache_hit,
            cache_ms,
            raster_ms,
            total_ms: ms(t0),
            version: self.version,
        })
    }
}

/// The request camera rescaled to the requested output size.
pub fn output_camera(req: &RenderRequest) -> Result<CameraView, ServiceError> {
    let mut cam = req.camera.clone();
    cam.validate()?;
    let w = req.width.unwrap_or(cam.width);
    let h = req.height.unwrap_or(cam.height);
    if w == 0 || h == 0 || w > MAX_FRAME_SIZE || h > MAX_FRAME_SIZE {
        return Err(ServiceError::Request(format!("output size {w}x{h} outside 1..={MAX_FRAME_SIZE}")));
    }
    if (w, h) != (cam.width, cam.height) {
        let sx = w as f64 / cam.width as f64;
        let sy = h as f64 / cam.height as f64;
        cam.fx *= sx;
        cam.cx *= sx;
        cam.fy *= sy;
        cam.cy *= sy;
        cam.width = w;
        cam.height = h;
    }
    Ok(cam)
}

pub fn encode(img: &Image, encoding: Encoding) -> Result<Vec<u8>, ServiceError> {
    let rgb = img.to_rgb8();
    let mut out = Cursor::new(Vec::new());
    match encoding {
        Encoding::Png => rgb.write_to(&mut out, ImageFormat::Png)?,
        Encoding::Jpeg => JpegEncoder::new_with_quality(&mut out, JPEG_QUALITY).encode_image(&rgb)?,
    }
    Ok(out.into_inner())
}

/// The current snapshot. Publishing swaps the pointer; readers keep the
/// snapshot they cloned for the whole request.
pub struct SnapshotStore {
    current: RwLock<Arc<Snapshot>>,
}

impl SnapshotStore {
    pub fn new(snapshot: Snapshot) -> Self {
        Self {
            current: RwLock::new(Arc::new(snapshot)),
        }
    }

    pub fn current(&self) -> Arc<Snapshot> {
        self.current.read().expect("snapshot lock").clone()
    }

    pub fn publish(&self, snapshot: Snapshot) {
        *self.current.write().expect("snapshot lock") = Arc::new(snapshot);
    }

    /// Publishes a training state under the next version number.
    pub fn publish_state(&self, state: &TrainState, cache_capacity: usize) -> u64 {
        let version = self.current().version + 1;
        self.publish(Snapshot::from_state(state, version, cache_capacity));
        version
    }
}
