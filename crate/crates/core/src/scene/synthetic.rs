//! Synthetic scenes with known ground truth.
//!
//! A random cloud of coloured Gaussians inside a ball of radius 1 is rendered
//! from cameras on a ring around it. Each image belongs to one of a few
//! appearance conditions: a per-channel gain and bias applied to the Gaussian
//! colours before rendering, and a matching sky (a sigmoid-SH function of the
//! ray direction) composited behind them. Some images get an opaque
//! rectangle pasted into their lower part, standing in for a transient
//! occluder; its exact mask is recorded.
//!
//! The cloud handed to training is the ground truth with perturbed geometry,
//! random appearance features, and optionally a shell of faint Gaussians far
//! outside the object (where a model without a background would have to put
//! the sky).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CameraView, Gaussian, GaussianCloud, SceneBundle, TrainImage};
use crate::appearance::init_table;
use crate::background::background_image;
use crate::buffer::Image;
use crate::raster;
use crate::sh::{ShCoefficients, C0};
use crate::{Error, Result, BACKGROUND_SH_DEGREE, FEATURE_DIM};

/// Radius of the ball holding the ground-truth Gaussians.
pub const SCENE_RADIUS: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub gaussians: usize,
    pub views: usize,
    pub appearances: usize,
    /// Area fraction of each occluder rectangle; 0 disables occluders.
    pub occluder_fraction: f64,
    /// Fraction of images that receive an occluder.
    pub occluded_images: f64,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    pub fov_degrees: f64,
    pub camera_distance: f64,
    /// Number of faint Gaussians placed on a distant shell in the initial cloud.
    pub far_shell: usize,
    pub far_shell_radius: f64,
    /// Standard deviation of the position noise of the initial cloud.
    pub init_position_noise: f64,
    pub init_scale_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            gaussians: 1000,
            views: 24,
            appearances: 4,
            occluder_fraction: 0.0,
            occluded_images: 0.3,
            width: 64,
            height: 64,
            fov_degrees: 50.0,
            camera_distance: 4.0,
            far_shell: 0,
            far_shell_radius: 20.0,
            init_position_noise: 0.02,
            init_scale_noise: 0.1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 {
            return Err(Error::Argument("a synthetic scene needs at least one view".into()));
        }
        if self.views > 64 || self.gaussians > 5000 {
            return Err(Error::Argument(format!(
                "{} views / {} Gaussians exceed the generator limits (64 / 5000)",
                self.views, self.gaussians
            )));
        }
        if self.appearances == 0 {
            return Err(Error::Argument("at least one appearance condition is required".into()));
        }
        if !(0.0..0.5).contains(&self.occluder_fraction) || !(0.0..=1.0).contains(&self.occluded_images) {
            return Err(Error::Argument("occluder fractions out of range".into()));
        }
        if self.width < 4 || self.height < 4 {
            return Err(Error::Argument("images must be at least 4x4".into()));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 170.0) || !(self.camera_distance > 1.5 * SCENE_RADIUS) {
            return Err(Error::Argument("camera placement out of range".into()));
        }
        Ok(())
    }
}

/// `c′ = clamp(gain ⊙ c + bias)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorTransform {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
}

impl ColorTransform {
    pub const IDENTITY: Self = Self {
        gain: [1.0; 3],
        bias: [0.0; 3],
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            gain: [0; 3].map(|_| rng.random_range(0.6..1.4)),
            bias: [0; 3].map(|_| rng.random_range(-0.12..0.12)),
        }
    }

    pub fn apply(&self, c: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|k| (self.gain[k] * c[k] + self.bias[k]).clamp(0.02, 0.98))
    }

    /// RMS difference of the two transforms over a grid of colours.
    pub fn distance(&self, other: &Self) -> f64 {
        let levels = [0.2, 0.5, 0.8];
        let mut acc = 0.0;
        let mut n = 0.0;
        for &v in &levels {
            let (a, b) = (self.apply([v; 3]), other.apply([v; 3]));
            for k in 0..3 {
                acc += (a[k] - b[k]).powi(2);
                n += 1.0;
            }
        }
        (acc / n).sqrt()
    }
}

/// One appearance condition: colour transform plus sky.
#[derive(Clone, Debug, PartialEq)]
pub struct Appearance {
    pub transform: ColorTransform,
    pub sky: ShCoefficients,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub cloud: GaussianCloud,
    /// Untransformed colour per Gaussian, `N × 3`.
    pub colors: Vec<f64>,
    pub appearances: Vec<Appearance>,
    /// Appearance condition of each image.
    pub image_appearance: Vec<usize>,
    /// Exact occluder mask per image (`true` = occluded), if any.
    pub occluder_masks: Vec<Option<Vec<bool>>>,
    /// Images before occluders were pasted.
    pub clean_images: Vec<Image>,
}

impl GroundTruth {
    /// Ground-truth frame for any camera and appearance (linear, unquantized).
    pub fn render(&self, camera: &CameraView, appearance: &Appearance) -> Image {
        let colors: Vec<f64> = self
            .colors
            .chunks(3)
            .flat_map(|c| appearance.transform.apply([c[0], c[1], c[2]]))
            .collect();
        let out = raster::render(&self.cloud, &colors, camera);
        let sky = background_image(&appearance.sky, camera);
        crate::background::composite(&out, &sky).expect("matching shapes")
    }

    pub fn render_appearance(&self, camera: &CameraView, a: usize) -> Image {
        self.render(camera, &self.appearances[a])
    }

    /// Accumulated opacity of the ground-truth object for a camera.
    pub fn coverage(&self, camera: &CameraView) -> Vec<f64> {
        raster::render(&self.cloud, &vec![0.0; self.colors.len()], camera).alpha
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub config: SyntheticConfig,
    /// Observed images and the initial (perturbed) cloud.
    pub bundle: SceneBundle,
    pub truth: GroundTruth,
}

fn random_quaternion<R: Rng + ?Sized>(rng: &mut R) -> [f64; 4] {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let q = [n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng)];
        let len = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len > 1e-6 {
            return q.map(|v| v / len);
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Smooth colour field over the scene plus per-Gaussian noise.
fn base_color<R: Rng + ?Sized>(p: [f64; 3], phase: &[f64; 9], rng: &mut R) -> [f64; 3] {
    let mut c = [0.0; 3];
    for (k, v) in c.iter_mut().enumerate() {
        let s = (2.1 * p[0] + phase[3 * k]).sin() * (1.7 * p[1] + phase[3 * k + 1]).cos()
            + 0.5 * (2.5 * p[2] + phase[3 * k + 2]).sin();
        *v = (0.5 + 0.28 * s + rng.random_range(-0.05..0.05)).clamp(0.05, 0.95);
    }
    c
}

/// A smooth random sky: degree-2 SH with a dominant vertical gradient.
fn sample_sky<R: Rng + ?Sized>(rng: &mut R) -> ShCoefficients {
    let mut sky = ShCoefficients::zeros(BACKGROUND_SH_DEGREE).expect("valid degree");
    let base = [0.45, 0.6, 0.85];
    for c in 0..3 {
        let b: f64 = base[c] + rng.random_range(-0.1..0.1);
        sky.set(c, 0, logit(b) / C0);
        // brighter towards world +y
        sky.set(c, 1, -rng.random_range(0.4..0.9));
        for k in 2..9 {
            sky.set(c, k, rng.random_range(-0.15..0.15));
        }
    }
    sky
}

/// Shifts a sky's DC logits to give each appearance its own sky.
fn shift_sky(base: &ShCoefficients, shift: [f64; 3]) -> ShCoefficients {
    let mut s = base.clone();
    for (c, d) in shift.iter().enumerate() {
        s.set(c, 0, base.get(c, 0) + d / C0);
    }
    s
}

/// Appearance conditions separated by at least `min_distance` (best effort).
fn sample_appearances<R: Rng + ?Sized>(rng: &mut R, n: usize, sky: &ShCoefficients) -> Vec<Appearance> {
    let mut out: Vec<Appearance> = Vec::with_capacity(n);
    let mut min_distance = 0.12;
    let mut attempts = 0;
    while out.len() < n {
        let t = if out.is_empty() {
            ColorTransform::IDENTITY
        } else {
            ColorTransform::sample(rng)
        };
        attempts += 1;
        if attempts % 200 == 0 {
            min_distance *= 0.8;
        }
        if out.iter().all(|a| a.transform.distance(&t) >= min_distance) {
            let shift = [0; 3].map(|_| rng.random_range(-0.6..0.6));
            let sky = if out.is_empty() { sky.clone() } else { shift_sky(sky, shift) };
            out.push(Appearance { transform: t, sky });
        }
    }
    out
}

/// Axis-aligned rectangle of about `fraction` of the image, entirely below
/// the row `0.4·H`.
fn occluder_rect<R: Rng + ?Sized>(rng: &mut R, w: usize, h: usize, fraction: f64) -> [usize; 4] {
    let area = fraction * (w * h) as f64;
    let top = (0.4 * h as f64).floor() as usize + 1;
    let max_h = h - top;
    let aspect: f64 = rng.random_range(0.7..1.5);
    let mut rh = ((area / aspect).sqrt().round() as usize).clamp(1, max_h);
    let mut rw = ((area / rh as f64).round() as usize).clamp(1, w);
    if rw == w {
        rh = ((area / w as f64).round() as usize).clamp(1, max_h);
        rw = ((area / rh as f64).round() as usize).clamp(1, w);
    }
    let x0 = rng.random_range(0..=w - rw);
    let y0 = rng.random_range(top..=h - rh);
    [x0, y0, rw, rh]
}

pub fn generate_synthetic_scene(config: &SyntheticConfig) -> Result<SyntheticScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();

    // ground-truth cloud
    let phase: [f64; 9] = [0; 9].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let mut gt = GaussianCloud::new();
    let mut colors = Vec::with_capacity(3 * config.gaussians);
    while gt.len() < config.gaussians {
        let p = [0; 3].map(|_| rng.random_range(-SCENE_RADIUS..SCENE_RADIUS));
        if p.iter().map(|v| v * v).sum::<f64>() > SCENE_RADIUS * SCENE_RADIUS {
            continue;
        }
        let ls = [0; 3].map(|_| rng.random_range(0.04f64.ln()..0.1f64.ln()));
        gt.push(Gaussian {
            mean: p,
            rotation: random_quaternion(&mut rng),
            log_scale: ls,
            opacity_logit: rng.random_range(0.5..2.5),
            feature: vec![0.0; FEATURE_DIM],
        });
        colors.extend(base_color(p, &phase, &mut rng));
    }

    let sky = sample_sky(&mut rng);
    let appearances = sample_appearances(&mut rng, config.appearances, &sky);

    // cameras on a ring
    let focal = 0.5 * config.width as f64 / (0.5 * config.fov_degrees.to_radians()).tan();
    let mut cameras = Vec::with_capacity(config.views);
    for v in 0..config.views {
        let az = std::f64::consts::TAU * (v as f64 + rng.random_range(-0.3..0.3)) / config.views as f64;
        let el = rng.random_range(-15.0f64..25.0).to_radians();
        let d = config.camera_distance;
        let eye = [d * el.cos() * az.sin(), d * el.sin(), -d * el.cos() * az.cos()];
        cameras.push(CameraView::look_at(
            eye,
            [0.0; 3],
            [0.0, 1.0, 0.0],
            focal,
            config.width,
            config.height,
        )?);
    }

    // which images carry occluders
    let n_occ = if config.occluder_fraction > 0.0 {
        (config.occluded_images * config.views as f64).round() as usize
    } else {
        0
    };
    let mut order: Vec<usize> = (0..config.views).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut occluded = vec![false; config.views];
    for &v in order.iter().take(n_occ) {
        occluded[v] = true;
    }

    let truth_partial = GroundTruth {
        cloud: gt.clone(),
        colors,
        appearances,
        image_appearance: (0..config.views).map(|v| v % config.appearances).collect(),
        occluder_masks: Vec::new(),
        clean_images: Vec::new(),
    };
    let mut images = Vec::with_capacity(config.views);
    let mut masks = Vec::with_capacity(config.views);
    let mut clean_images = Vec::with_capacity(config.views);
    for (v, camera) in cameras.into_iter().enumerate() {
        let mut clean = truth_partial.render_appearance(&camera, truth_partial.image_appearance[v]);
        clean.quantize_srgb8();
        let mut observed = clean.clone();
        let mask = if occluded[v] {
            let [x0, y0, rw, rh] = occluder_rect(&mut rng, config.width, config.height, config.occluder_fraction);
            let color = [0; 3].map(|_| rng.random_range(0.0..1.0));
            let mut m = vec![false; config.width * config.height];
            for y in y0..y0 + rh {
                for x in x0..x0 + rw {
                    m[y * config.width + x] = true;
                    observed.set_pixel(x, y, color);
                }
            }
            observed.quantize_srgb8();
            Some(m)
        } else {
            None
        };
        images.push(TrainImage {
            index: v,
            image: observed,
            camera,
        });
        masks.push(mask);
        clean_images.push(clean);
    }

    // initial cloud: perturbed truth, fresh features, optional far shell
    let mut init = GaussianCloud::new();
    for i in 0..gt.len() {
        let g = gt.gaussian(i);
        let q = g.rotation.map(|v| v + 0.05 * normal.sample(&mut rng));
        init.push(Gaussian {
            mean: g.mean.map(|v| v + config.init_position_noise * SCENE_RADIUS * normal.sample(&mut rng)),
            rotation: q,
            log_scale: g.log_scale.map(|v| v + config.init_scale_noise * normal.sample(&mut rng)),
            opacity_logit: logit(0.5),
            feature: init_table(&mut rng, FEATURE_DIM),
        });
    }
    let r = config.far_shell_radius * SCENE_RADIUS;
    let shell_scale = (r * 4.0 / (config.far_shell.max(1) as f64).sqrt()).ln();
    for _ in 0..config.far_shell {
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let el = rng.random_range(-25.0f64..45.0).to_radians();
        init.push(Gaussian {
            mean: [r * el.cos() * az.sin(), r * el.sin(), -r * el.cos() * az.cos()],
            rotation: random_quaternion(&mut rng),
            log_scale: [shell_scale; 3],
            opacity_logit: logit(0.1),
            feature: init_table(&mut rng, FEATURE_DIM),
        });
    }

    let bundle = SceneBundle {
        name: format!("synthetic-{}", config.seed),
        units: "scene radius".into(),
        cloud: init,
        images,
    };
    bundle.validate()?;
    Ok(SyntheticScene {
        config: config.clone(),
        bundle,
        truth: GroundTruth {
            occluder_masks: masks,
            clean_images,
            ..truth_partial
        },
    })
}

/// Images of a pure sky (no Gaussians) from `views` random directions.
pub fn generate_sky_images(seed: u64, views: usize, width: usize, height: usize) -> Result<(ShCoefficients, SceneBundle)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sky = sample_sky(&mut rng);
    let focal = 0.5 * width as f64 / (25.0f64.to_radians()).tan();
    let mut images = Vec::with_capacity(views);
    for v in 0..views {
        let az = rng.random_range(0.0..std::f64::consts::TAU);
        let el = rng.random_range(-10.0f64..40.0).to_radians();
        let target = [el.cos() * az.sin(), el.sin(), -el.cos() * az.cos()];
        let camera = CameraView::look_at([0.0; 3], target, [0.0, 1.0, 0.0], focal, width, height)?;
        let mut image = background_image(&sky, &camera);
        image.quantize_srgb8();
        images.push(TrainImage { index: v, image, camera });
    }
    Ok((
        sky,
        SceneBundle {
            name: format!("sky-{seed}"),
            units: "scene radius".into(),
            cloud: GaussianCloud::new(),
            images,
        },
    ))
}
