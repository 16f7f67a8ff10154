//! Per-image appearance embeddings and per-Gaussian features mapped to SH
//! colour coefficients by a small MLP.
//!
//! The MLP never sees the viewing direction: it predicts coefficients once per
//! `(embedding, Gaussian)`, and the direction only enters when the
//! coefficients are evaluated. That is what makes [`CachedAppearance`]
//! possible: for a fixed embedding, the coefficient table is computed once and
//! reused for every camera.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rayon::prelude::*;

use crate::nn::{Mlp, MlpTape};
use crate::scene::{CameraView, GaussianCloud};
use crate::sh::{self, num_basis, Direction, ShCoefficients};
use crate::{sigmoid, Error, Result, COLOR_SH_DEGREE, EMBEDDING_DIM, FEATURE_DIM};

/// Coefficients per Gaussian: 3 channels × 16 basis functions.
pub const COEFFS: usize = 3 * num_basis(COLOR_SH_DEGREE);
pub const HIDDEN: usize = 256;
pub const MLP_SIZES: [usize; 4] = [EMBEDDING_DIM + FEATURE_DIM, HIDDEN, HIDDEN, COEFFS];
/// Half-width of the uniform range used to initialize embeddings and features.
pub const INIT_RANGE: f64 = 0.1;

#[derive(Debug)]
pub struct AppearanceModel {
    /// `N_img × 48`, row-major.
    pub embeddings: Vec<f64>,
    mlp: Mlp,
    version: u64,
    mlp_batches: AtomicU64,
}

impl Clone for AppearanceModel {
    fn clone(&self) -> Self {
        Self {
            embeddings: self.embeddings.clone(),
            mlp: self.mlp.clone(),
            version: self.version,
            mlp_batches: AtomicU64::new(self.mlp_batches()),
        }
    }
}

impl PartialEq for AppearanceModel {
    fn eq(&self, other: &Self) -> bool {
        self.embeddings == other.embeddings && self.mlp == other.mlp
    }
}

/// Small zero-mean uniform values for a fresh feature or embedding table.
pub fn init_table<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect()
}

impl AppearanceModel {
    pub fn new<R: Rng + ?Sized>(num_images: usize, rng: &mut R) -> Self {
        let mlp = Mlp::init_he(&MLP_SIZES, rng);
        let embeddings = init_table(rng, num_images * EMBEDDING_DIM);
        Self::from_parts(embeddings, mlp).expect("consistent sizes")
    }

    pub fn from_parts(embeddings: Vec<f64>, mlp: Mlp) -> Result<Self> {
        if mlp.sizes() != MLP_SIZES {
            return Err(Error::Dimension(format!(
                "appearance MLP {:?}, expected {:?}",
                mlp.sizes(),
                MLP_SIZES
            )));
        }
        if embeddings.len() % EMBEDDING_DIM != 0 {
            return Err(Error::Dimension(format!(
                "{} embedding values is not a multiple of {EMBEDDING_DIM}",
                embeddings.len()
            )));
        }
        Ok(Self {
            embeddings,
            mlp,
            version: 0,
            mlp_batches: AtomicU64::new(0),
        })
    }

    pub fn num_images(&self) -> usize {
        self.embeddings.len() / EMBEDDING_DIM
    }

    pub fn embedding(&self, j: usize) -> &[f64] {
        &self.embeddings[j * EMBEDDING_DIM..(j + 1) * EMBEDDING_DIM]
    }

    pub fn embedding_mut(&mut self, j: usize) -> &mut [f64] {
        self.version += 1;
        &mut self.embeddings[j * EMBEDDING_DIM..(j + 1) * EMBEDDING_DIM]
    }

    /// Mean of all training embeddings.
    pub fn mean_embedding(&self) -> Vec<f64> {
        let n = self.num_images().max(1) as f64;
        let mut mean = vec![0.0; EMBEDDING_DIM];
        for row in self.embeddings.chunks(EMBEDDING_DIM) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        mean
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    /// Mutable access to θ; invalidates every cache built so far.
    pub fn mlp_mut(&mut self) -> &mut Mlp {
        self.version += 1;
        &mut self.mlp
    }

    /// Incremented whenever θ (or, via [`AppearanceModel::invalidate`], the
    /// features) change.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Marks caches stale after a change the model cannot see, such as an
    /// update of the per-Gaussian features.
    pub fn invalidate(&mut self) {
        self.version += 1;
    }

    /// Number of batched MLP evaluations issued so far.
    pub fn mlp_batches(&self) -> u64 {
        self.mlp_batches.load(Ordering::Relaxed)
    }

    fn check_embedding(embedding: &[f64]) -> Result<()> {
        if embedding.len() != EMBEDDING_DIM {
            return Err(Error::Dimension(format!(
                "embedding has {} values, expected {EMBEDDING_DIM}",
                embedding.len()
            )));
        }
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(())
    }

    fn inputs(embedding: &[f64], features: &[f64], rows: &[usize]) -> Vec<f64> {
        let width = EMBEDDING_DIM + FEATURE_DIM;
        let mut x = vec![0.0; rows.len() * width];
        x.par_chunks_mut(width).zip(rows.par_iter()).for_each(|(xr, &i)| {
            xr[..EMBEDDING_DIM].copy_from_slice(embedding);
            xr[EMBEDDING_DIM..].copy_from_slice(&features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM]);
        });
        x
    }

    /// Coefficient table (`N × 48`, channel-major per row) for all Gaussians,
    /// from one batched MLP evaluation.
    pub fn predict_table(&self, embedding: &[f64], features: &[f64]) -> Result<Vec<f64>> {
        Self::check_embedding(embedding)?;
        if features.len() % FEATURE_DIM != 0 {
            return Err(Error::Dimension(format!(
                "{} feature values is not a multiple of {FEATURE_DIM}",
                features.len()
            )));
        }
        let n = features.len() / FEATURE_DIM;
        let rows: Vec<usize> = (0..n).collect();
        let x = Self::inputs(embedding, features, &rows);
        self.mlp_batches.fetch_add(1, Ordering::Relaxed);
        Ok(self.mlp.infer(&x, n))
    }

    /// `b_i = MLP_θ(ℓ, f_i)` for every Gaussian.
    pub fn predict_sh(&self, embedding: &[f64], features: &[f64]) -> Result<Vec<ShCoefficients>> {
        let table = self.predict_table(embedding, features)?;
        table
            .chunks(COEFFS)
            .map(|row| ShCoefficients::from_values(COLOR_SH_DEGREE, row.to_vec()))
            .collect()
    }

    /// One MLP pass for `embedding`; the result renders any camera.
    pub fn build_cache(&self, embedding: &[f64], cloud: &GaussianCloud) -> Result<CachedAppearance> {
        let table = self.predict_table(embedding, &cloud.features)?;
        Ok(CachedAppearance {
            embedding: embedding.to_vec(),
            table,
            version: self.version,
            num_gaussians: cloud.len(),
        })
    }

    /// Live forward for training: runs the MLP on `rows` only and evaluates
    /// their colours for `camera`. Colours of other Gaussians are left at 0.
    pub fn forward(
        &self,
        embedding: &[f64],
        cloud: &GaussianCloud,
        camera: &CameraView,
        rows: Vec<usize>,
    ) -> Result<AppearanceForward> {
        Self::check_embedding(embedding)?;
        let x = Self::inputs(embedding, &cloud.features, &rows);
        self.mlp_batches.fetch_add(1, Ordering::Relaxed);
        let (coeffs, tape) = self.mlp.forward(&x, rows.len());
        let mut colors = vec![0.0; 3 * cloud.len()];
        let center = camera.center();
        let per_row: Vec<[f64; 3]> = rows
            .par_iter()
            .zip(coeffs.par_chunks(COEFFS))
            .map(|(&i, c)| eval_color(c, view_vector(cloud.mean(i), center)))
            .collect();
        for (&i, c) in rows.iter().zip(&per_row) {
            colors[3 * i..3 * i + 3].copy_from_slice(c);
        }
        Ok(AppearanceForward {
            rows,
            coeffs,
            tape,
            colors,
            center,
        })
    }

    /// Reverse pass of [`AppearanceModel::forward`] given `∂L/∂colour` for
    /// every Gaussian (`N × 3`).
    pub fn backward(
        &self,
        fwd: &AppearanceForward,
        cloud: &GaussianCloud,
        d_colors: &[f64],
    ) -> AppearanceGrads {
        assert_eq!(d_colors.len(), 3 * cloud.len());
        let per_row: Vec<(Vec<f64>, [f64; 3])> = fwd
            .rows
            .par_iter()
            .zip(fwd.coeffs.par_chunks(COEFFS))
            .map(|(&i, c)| {
                let up = [d_colors[3 * i], d_colors[3 * i + 1], d_colors[3 * i + 2]];
                color_backward(c, view_vector(cloud.mean(i), fwd.center), up)
            })
            .collect();
        let mut d_out = Vec::with_capacity(fwd.rows.len() * COEFFS);
        let mut means = vec![0.0; 3 * cloud.len()];
        for (&i, (dc, dm)) in fwd.rows.iter().zip(&per_row) {
            d_out.extend_from_slice(dc);
            means[3 * i..3 * i + 3].copy_from_slice(dm);
        }
        let mut mlp = vec![0.0; self.mlp.params().len()];
        let dx = self.mlp.backward(&fwd.tape, &d_out, &mut mlp);
        let width = EMBEDDING_DIM + FEATURE_DIM;
        let mut embedding = vec![0.0; EMBEDDING_DIM];
        let mut features = vec![0.0; FEATURE_DIM * cloud.len()];
        for (&i, row) in fwd.rows.iter().zip(dx.chunks(width)) {
            for (e, v) in embedding.iter_mut().zip(&row[..EMBEDDING_DIM]) {
                *e += v;
            }
            features[i * FEATURE_DIM..(i + 1) * FEATURE_DIM].copy_from_slice(&row[EMBEDDING_DIM..]);
        }
        AppearanceGrads {
            embedding,
            features,
            mlp,
            means,
        }
    }
}

/// Activations of one live appearance evaluation.
#[derive(Clone, Debug)]
pub struct AppearanceForward {
    pub rows: Vec<usize>,
    pub coeffs: Vec<f64>,
    tape: MlpTape,
    /// `N × 3`, zero for Gaussians outside `rows`.
    pub colors: Vec<f64>,
    center: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceGrads {
    pub embedding: Vec<f64>,
    /// `N × 72`.
    pub features: Vec<f64>,
    pub mlp: Vec<f64>,
    /// Contribution through the viewing direction, `N × 3`.
    pub means: Vec<f64>,
}

/// Coefficient table for one embedding, tied to a model version.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedAppearance {
    pub embedding: Vec<f64>,
    /// `N × 48`.
    pub table: Vec<f64>,
    pub version: u64,
    pub num_gaussians: usize,
}

impl CachedAppearance {
    /// Fails if the model has changed since the cache was built.
    pub fn check(&self, model: &AppearanceModel, cloud: &GaussianCloud) -> Result<()> {
        if self.version != model.version() || self.num_gaussians != cloud.len() {
            return Err(Error::StaleCache(format!(
                "cache built at version {} for {} Gaussians, model is at version {} with {}",
                self.version,
                self.num_gaussians,
                model.version(),
                cloud.len()
            )));
        }
        Ok(())
    }

    pub fn coefficients(&self, i: usize) -> ShCoefficients {
        ShCoefficients::from_values(COLOR_SH_DEGREE, self.table[i * COEFFS..(i + 1) * COEFFS].to_vec())
            .expect("cached coefficients are well formed")
    }
}

/// Unnormalized direction from the camera centre to a Gaussian.
#[inline]
fn view_vector(mean: [f64; 3], center: [f64; 3]) -> [f64; 3] {
    [mean[0] - center[0], mean[1] - center[1], mean[2] - center[2]]
}

#[inline]
fn eval_color(coeffs: &[f64], v: [f64; 3]) -> [f64; 3] {
    let mut basis = [0.0; 16];
    sh::basis_into(Direction::new(v).to_array(), COLOR_SH_DEGREE, &mut basis);
    let l = sh::logits(coeffs, &basis);
    [sigmoid(l[0]), sigmoid(l[1]), sigmoid(l[2])]
}

/// `(∂L/∂coeffs, ∂L/∂mean)` for one Gaussian.
fn color_backward(coeffs: &[f64], v: [f64; 3], up: [f64; 3]) -> (Vec<f64>, [f64; 3]) {
    let n = num_basis(COLOR_SH_DEGREE);
    let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let d = Direction::new(v).to_array();
    let mut basis = [0.0; 16];
    let mut basis_grad = [[0.0; 3]; 16];
    sh::basis_into(d, COLOR_SH_DEGREE, &mut basis);
    sh::basis_grad_into(d, COLOR_SH_DEGREE, &mut basis_grad);
    let l = sh::logits(coeffs, &basis);
    let mut dc = vec![0.0; COEFFS];
    let mut dd = [0.0; 3];
    for c in 0..3 {
        let s = sigmoid(l[c]);
        let g = up[c] * s * (1.0 - s);
        if g == 0.0 {
            continue;
        }
        for k in 0..n {
            dc[c * n + k] = g * basis[k];
            for a in 0..3 {
                dd[a] += g * coeffs[c * n + k] * basis_grad[k][a];
            }
        }
    }
    if len <= 1e-12 {
        return (dc, [0.0; 3]);
    }
    // d = v / |v|
    let proj = dd[0] * d[0] + dd[1] * d[1] + dd[2] * d[2];
    let dm = [
        (dd[0] - d[0] * proj) / len,
        (dd[1] - d[1] * proj) / len,
        (dd[2] - d[2] * proj) / len,
    ];
    (dc, dm)
}

/// Per-Gaussian colours (`N × 3`) for a camera from a coefficient table
/// (`N × 48`), with `d_i = normalize(μ_i − camera centre)`.
pub fn colors_for_view(cloud: &GaussianCloud, table: &[f64], camera: &CameraView) -> Vec<f64> {
    assert_eq!(table.len(), COEFFS * cloud.len());
    let center = camera.center();
    let mut colors = vec![0.0; 3 * cloud.len()];
    colors
        .par_chunks_mut(3)
        .zip(table.par_chunks(COEFFS))
        .enumerate()
        .for_each(|(i, (out, c))| out.copy_from_slice(&eval_color(c, view_vector(cloud.mean(i), center))));
    colors
}

/// Colours for `camera` from a cache, refusing stale caches.
pub fn cached_colors(
    model: &AppearanceModel,
    cache: &CachedAppearance,
    cloud: &GaussianCloud,
    camera: &CameraView,
) -> Result<Vec<f64>> {
    cache.check(model, cloud)?;
    Ok(colors_for_view(cloud, &cache.table, camera))
}
