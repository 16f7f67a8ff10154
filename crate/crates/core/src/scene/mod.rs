//! Gaussians, cameras and training images, plus their on-disk formats.

pub mod format;
pub mod synthetic;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::buffer::Image;
use crate::{sigmoid, Error, Result, FEATURE_DIM};

pub use format::{load_scene, save_scene, validate_scene_dir};

/// All per-Gaussian optimizable state, stored as flat row-major buffers.
///
/// Covariances are factored as `Σ = R S Sᵀ Rᵀ` from a (not necessarily
/// normalized) quaternion `(w, x, y, z)` and per-axis log scales.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub means: Vec<f64>,
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub features: Vec<f64>,
}

/// One Gaussian, used when building clouds row by row.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub feature: Vec<f64>,
}

impl Default for GaussianCloud {
    fn default() -> Self {
        Self::new()
    }
}

impl GaussianCloud {
    pub fn new() -> Self {
        Self {
            means: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            features: Vec::new(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        assert_eq!(g.feature.len(), FEATURE_DIM, "feature width");
        self.means.extend_from_slice(&g.mean);
        self.rotations.extend_from_slice(&g.rotation);
        self.log_scales.extend_from_slice(&g.log_scale);
        self.opacity_logits.push(g.opacity_logit);
        self.features.extend_from_slice(&g.feature);
    }

    pub fn gaussian(&self, i: usize) -> Gaussian {
        Gaussian {
            mean: self.mean(i),
            rotation: self.rotation(i),
            log_scale: self.log_scale(i),
            opacity_logit: self.opacity_logits[i],
            feature: self.feature(i).to_vec(),
        }
    }

    #[inline]
    pub fn mean(&self, i: usize) -> [f64; 3] {
        [self.means[3 * i], self.means[3 * i + 1], self.means[3 * i + 2]]
    }

    #[inline]
    pub fn rotation(&self, i: usize) -> [f64; 4] {
        let r = &self.rotations[4 * i..4 * i + 4];
        [r[0], r[1], r[2], r[3]]
    }

    #[inline]
    pub fn log_scale(&self, i: usize) -> [f64; 3] {
        [
            self.log_scales[3 * i],
            self.log_scales[3 * i + 1],
            self.log_scales[3 * i + 2],
        ]
    }

    /// `α_base = sigmoid(opacity_logit)`.
    #[inline]
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    #[inline]
    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]
    }

    /// Keeps Gaussians whose `keep` flag is set.
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.len());
        crate::adam::retain_rows(&mut self.means, keep, 3);
        crate::adam::retain_rows(&mut self.rotations, keep, 4);
        crate::adam::retain_rows(&mut self.log_scales, keep, 3);
        crate::adam::retain_rows(&mut self.opacity_logits, keep, 1);
        crate::adam::retain_rows(&mut self.features, keep, FEATURE_DIM);
    }

    /// Checks buffer shapes and finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let shapes = [
            ("means", self.means.len(), 3 * n),
            ("rotations", self.rotations.len(), 4 * n),
            ("log_scales", self.log_scales.len(), 3 * n),
            ("features", self.features.len(), FEATURE_DIM * n),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Dimension(format!(
                    "{name} has {got} values, expected {want} for {n} Gaussians"
                )));
            }
        }
        for (name, buf) in [
            ("means", &self.means),
            ("rotations", &self.rotations),
            ("log_scales", &self.log_scales),
            ("opacity_logits", &self.opacity_logits),
            ("features", &self.features),
        ] {
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("Gaussian {name}")));
            }
        }
        for i in 0..n {
            let q = self.rotation(i);
            if q.iter().map(|v| v * v).sum::<f64>() == 0.0 {
                return Err(Error::Argument(format!("Gaussian {i} has a zero quaternion")));
            }
        }
        Ok(())
    }
}

/// Pinhole camera with a world-to-camera rigid transform.
///
/// Camera axes follow the usual computer-vision convention: +x right,
/// +y down, +z forward. Pixel `(u, v)` has its centre at `(u + 0.5, v + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    /// Row-major world-to-camera rotation.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraView {
    /// Camera at `eye` looking at `target`, with `up` the approximate world up vector.
    /// The principal point is the image centre.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z = normalize(sub(target, eye))
            .ok_or_else(|| Error::Argument("camera eye equals target".into()))?;
        let upz = dot(up, z);
        let y = normalize([
            -(up[0] - upz * z[0]),
            -(up[1] - upz * z[1]),
            -(up[2] - upz * z[2]),
        ])
        .ok_or_else(|| Error::Argument("up vector parallel to view direction".into()))?;
        let x = cross(y, z);
        let rotation = [x, y, z];
        let translation = [-dot(x, eye), -dot(y, eye), -dot(z, eye)];
        let cam = Self {
            rotation,
            translation,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        let intrinsics = [self.fx, self.fy, self.cx, self.cy];
        let mut all = r.iter().flatten().chain(&self.translation).chain(&intrinsics);
        if all.any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("camera".into()));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(r[i], r[j]);
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-9 {
                    return Err(Error::Argument("camera rotation is not orthonormal".into()));
                }
            }
        }
        if dot(cross(r[0], r[1]), r[2]) < 0.0 {
            return Err(Error::Argument("camera rotation has det -1".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Argument("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Argument("camera has an empty image plane".into()));
        }
        Ok(())
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> [f64; 3] {
        let r = &self.rotation;
        let t = self.translation;
        [
            -(r[0][0] * t[0] + r[1][0] * t[1] + r[2][0] * t[2]),
            -(r[0][1] * t[0] + r[1][1] * t[1] + r[2][1] * t[2]),
            -(r[0][2] * t[0] + r[1][2] * t[1] + r[2][2] * t[2]),
        ]
    }

    #[inline]
    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            dot(r[0], p) + self.translation[0],
            dot(r[1], p) + self.translation[1],
            dot(r[2], p) + self.translation[2],
        ]
    }

    /// World-space (unnormalized) direction of the ray through the centre of pixel `(u, v)`.
    #[inline]
    pub fn ray_direction(&self, u: usize, v: usize) -> [f64; 3] {
        let xc = (u as f64 + 0.5 - self.cx) / self.fx;
        let yc = (v as f64 + 0.5 - self.cy) / self.fy;
        let r = &self.rotation;
        [
            r[0][0] * xc + r[1][0] * yc + r[2][0],
            r[0][1] * xc + r[1][1] * yc + r[2][1],
            r[0][2] * xc + r[1][2] * yc + r[2][2],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainImage {
    pub index: usize,
    pub image: Image,
    pub camera: CameraView,
}

impl TrainImage {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        if self.image.width() != self.camera.width || self.image.height() != self.camera.height {
            return Err(Error::Dimension(format!(
                "image {} is {}x{} but its camera is {}x{}",
                self.index,
                self.image.width(),
                self.image.height(),
                self.camera.width,
                self.camera.height
            )));
        }
        if self.image.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixels of image {}", self.index)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle {
    pub name: String,
    pub units: String,
    pub cloud: GaussianCloud,
    pub images: Vec<TrainImage>,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<()> {
        self.cloud.validate()?;
        for (j, img) in self.images.iter().enumerate() {
            if img.index != j {
                return Err(Error::Argument(format!(
                    "image indices must be dense: slot {j} holds index {}",
                    img.index
                )));
            }
            img.validate()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_scene(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_scene(self, path)
    }

    /// Radius of the bounding sphere of the camera centres around their mean;
    /// used to scale position learning rates and densification thresholds.
    pub fn camera_extent(&self) -> f64 {
        if self.images.is_empty() {
            return 1.0;
        }
        let centers: Vec<[f64; 3]> = self.images.iter().map(|i| i.camera.center()).collect();
        let n = centers.len() as f64;
        let mut mean = [0.0; 3];
        for c in &centers {
            for k in 0..3 {
                mean[k] += c[k] / n;
            }
        }
        let r = centers
            .iter()
            .map(|c| norm(sub(*c, mean)))
            .fold(0.0, f64::max);
        if r > 0.0 {
            1.1 * r
        } else {
            1.0
        }
    }
}

#[inline]
pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: [f64; 3]) -> Option<[f64; 3]> {
    let n = norm(a);
    (n > 1e-12).then(|| [a[0] / n, a[1] / n, a[2] / n])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraView {
        CameraView::look_at([0.0, -1.0, -4.0], [0.0; 3], [0.0, 1.0, 0.0], 60.0, 32, 24).unwrap()
    }

    #[test]
    fn look_at_is_a_proper_rigid_transform() {
        let c = cam();
        c.validate().unwrap();
        let center = c.center();
        assert!((center[1] + 1.0).abs() < 1e-12 && (center[2] + 4.0).abs() < 1e-12);
        // the target projects onto the optical axis
        let t = c.world_to_camera([0.0; 3]);
        assert!(t[0].abs() < 1e-12 && t[1].abs() < 1e-12 && t[2] > 0.0);
        // world up maps to image up (negative camera y)
        let up = c.world_to_camera([0.0, 1.0, 0.0]);
        assert!(up[1] < t[1]);
    }

    #[test]
    fn invalid_cameras_are_rejected() {
        let mut c = cam();
        c.fx = 0.0;
        assert!(c.validate().is_err());
        let mut c = cam();
        c.rotation[0] = [2.0, 0.0, 0.0];
        assert!(c.validate().is_err());
        let mut c = cam();
        c.rotation[2] = [-c.rotation[2][0], -c.rotation[2][1], -c.rotation[2][2]];
        assert!(c.validate().is_err());
    }

    #[test]
    fn image_camera_mismatch_names_the_image() {
        let img = TrainImage {
            index: 3,
            image: Image::new(4, 4),
            camera: cam(),
        };
        let err = img.validate().unwrap_err().to_string();
        assert!(err.contains("image 3"), "{err}");
    }

    #[test]
    fn retain_drops_rows() {
        let mut cloud = GaussianCloud::new();
        for i in 0..3 {
            cloud.push(Gaussian {
                mean: [i as f64; 3],
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: [0.0; 3],
                opacity_logit: i as f64,
                feature: vec![i as f64; FEATURE_DIM],
            });
        }
        cloud.retain(&[true, false, true]);
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.mean(1), [2.0; 3]);
        assert_eq!(cloud.feature(1)[0], 2.0);
        cloud.validate().unwrap();
    }
}
