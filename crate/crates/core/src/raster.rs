//! Tiled differentiable rasterizer for 3D Gaussians.
//!
//! Forward: every Gaussian is projected to a 2D mean and covariance, sorted
//! once by `(depth, index)`, binned into 16×16 tiles by the bounding box of
//! its 3σ ellipse, and alpha-blended front to back per pixel. A Gaussian only
//! touches pixels with `dᵀ Σ′⁻¹ d ≤ 9`, so the result does not depend on the
//! tiling.
//!
//! Backward: per pixel, the blend is walked back to front, recovering the
//! transmittance by division. Per-Gaussian partials are kept per tile and
//! reduced in tile order, so gradients are bit-reproducible.

use rayon::prelude::*;

use crate::buffer::Image;
use crate::scene::{CameraView, GaussianCloud};
use crate::sigmoid;

pub const TILE: usize = 16;
/// Added to the diagonal of every projected covariance, in px².
pub const BLUR: f64 = 0.3;
/// Gaussians whose view-space depth is below this are culled.
pub const NEAR: f64 = 0.01;
pub const MAX_SIGMA: f64 = 0.999;
/// Blending stops before a Gaussian that would push transmittance below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Squared Mahalanobis radius of a Gaussian's support.
pub const SUPPORT: f64 = 9.0;

/// Row-major 3×3 matrix.
pub type Mat3 = [[f64; 3]; 3];

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Mat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// `Σ = R diag(exp(2·log_scale)) Rᵀ`. The quaternion is normalized internally.
pub fn compute_cov3d(q: [f64; 4], log_scale: [f64; 3]) -> Mat3 {
    let r = quat_to_matrix(q);
    let s2 = log_scale.map(|l| (2.0 * l).exp());
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| r[i][k] * s2[k] * r[j][k]).sum();
        }
    }
    out
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Footprint {
    /// Pixel coordinates of the projected mean.
    pub mean2d: [f64; 2],
    /// `(Σ′₀₀, Σ′₀₁, Σ′₁₁)` including the blur floor.
    pub cov2d: [f64; 3],
    /// `(Q₀₀, Q₀₁, Q₁₁)` with `Q = Σ′⁻¹`.
    pub conic: [f64; 3],
    pub depth: f64,
    /// View-space position.
    pub view: [f64; 3],
}

/// Projects a Gaussian. Returns `None` when it lies behind the near plane.
pub fn project_gaussian(mean: [f64; 3], cov3d: &Mat3, camera: &CameraView) -> Option<Footprint> {
    let t = camera.world_to_camera(mean);
    if !(t[2] > NEAR) {
        return None;
    }
    let (tx, ty, tz) = (t[0], t[1], t[2]);
    let j = [
        [camera.fx / tz, 0.0, -camera.fx * tx / (tz * tz)],
        [0.0, camera.fy / tz, -camera.fy * ty / (tz * tz)],
    ];
    let tm = mat23_mul(&j, &camera.rotation);
    let cov = project_cov(&tm, cov3d);
    let cov2d = [cov[0] + BLUR, cov[1], cov[2] + BLUR];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    assert!(det > 0.0, "projected covariance is singular");
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
    Some(Footprint {
        mean2d: [
            camera.fx * tx / tz + camera.cx,
            camera.fy * ty / tz + camera.cy,
        ],
        cov2d,
        conic,
        depth: tz,
        view: t,
    })
}

fn mat23_mul(a: &[[f64; 3]; 2], b: &Mat3) -> [[f64; 3]; 2] {
    let mut out = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Upper triangle of `T Σ Tᵀ`.
fn project_cov(t: &[[f64; 3]; 2], s: &Mat3) -> [f64; 3] {
    let mut ts = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            ts[i][j] = (0..3).map(|k| t[i][k] * s[k][j]).sum();
        }
    }
    let e = |i: usize, j: usize| (0..3).map(|k| ts[i][k] * t[j][k]).sum::<f64>();
    [e(0, 0), e(0, 1), e(1, 1)]
}

/// A Gaussian ready for blending.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedGaussian {
    pub footprint: Footprint,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Index of the Gaussian in its cloud.
    pub source: usize,
}

impl ProjectedGaussian {
    /// Blending weight at a pixel centre, or `None` outside the support.
    #[inline]
    pub fn sigma_at(&self, px: f64, py: f64) -> Option<f64> {
        let [u, v] = self.footprint.mean2d;
        let [a, b, c] = self.footprint.conic;
        let (dx, dy) = (px - u, py - v);
        let power = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if power > SUPPORT {
            return None;
        }
        Some((self.opacity * (-0.5 * power).exp()).min(MAX_SIGMA))
    }

    /// Half extents of the 3σ ellipse's bounding box.
    fn extent(&self) -> [f64; 2] {
        let s = SUPPORT.sqrt();
        [
            s * self.footprint.cov2d[0].sqrt(),
            s * self.footprint.cov2d[2].sqrt(),
        ]
    }
}

/// Projects every Gaussian in front of the camera and sorts by `(depth, index)`.
/// `colors` holds one RGB triple per Gaussian.
pub fn project_cloud(cloud: &GaussianCloud, colors: &[f64], camera: &CameraView) -> Vec<ProjectedGaussian> {
    assert_eq!(colors.len(), 3 * cloud.len());
    let mut out: Vec<ProjectedGaussian> = (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| {
            let cov = compute_cov3d(cloud.rotation(i), cloud.log_scale(i));
            project_gaussian(cloud.mean(i), &cov, camera).map(|footprint| ProjectedGaussian {
                footprint,
                opacity: cloud.opacity(i),
                color: [colors[3 * i], colors[3 * i + 1], colors[3 * i + 2]],
                source: i,
            })
        })
        .collect();
    sort_projected(&mut out);
    out
}

/// Indices of Gaussians in front of the near plane.
pub fn visible_gaussians(cloud: &GaussianCloud, camera: &CameraView) -> Vec<usize> {
    (0..cloud.len())
        .filter(|&i| camera.world_to_camera(cloud.mean(i))[2] > NEAR)
        .collect()
}

pub fn sort_projected(p: &mut [ProjectedGaussian]) {
    p.sort_by(|a, b| {
        a.footprint
            .depth
            .total_cmp(&b.footprint.depth)
            .then(a.source.cmp(&b.source))
    });
}

/// Forward result plus everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// `C(r)` without background.
    pub color: Image,
    /// `α(r) = 1 − Π(1 − σ)`.
    pub alpha: Vec<f64>,
    /// Depth-sorted Gaussians that were rendered.
    pub projected: Vec<ProjectedGaussian>,
    /// For each tile, indices into `projected` in blending order.
    pub tiles: Vec<Vec<u32>>,
    /// Per pixel, number of entries of its tile list consumed before stopping.
    consumed: Vec<u32>,
    final_transmittance: Vec<f64>,
}

impl RenderOutput {
    pub fn tiles_x(&self) -> usize {
        self.width.div_ceil(TILE)
    }

    pub fn tiles_y(&self) -> usize {
        self.height.div_ceil(TILE)
    }

    pub fn final_transmittance(&self) -> &[f64] {
        &self.final_transmittance
    }
}

fn tile_rect(g: &ProjectedGaussian, tiles_x: usize, tiles_y: usize) -> Option<[usize; 4]> {
    let [u, v] = g.footprint.mean2d;
    let [ex, ey] = g.extent();
    // Pixel centres sit at +0.5; one extra pixel of slack on each side.
    let x0 = ((u - ex - 1.5) / TILE as f64).floor();
    let x1 = ((u + ex + 1.0) / TILE as f64).floor();
    let y0 = ((v - ey - 1.5) / TILE as f64).floor();
    let y1 = ((v + ey + 1.0) / TILE as f64).floor();
    if !(x1 >= 0.0 && y1 >= 0.0 && x0 < tiles_x as f64 && y0 < tiles_y as f64) {
        return None;
    }
    Some([
        x0.max(0.0) as usize,
        (x1 as usize).min(tiles_x - 1),
        y0.max(0.0) as usize,
        (y1 as usize).min(tiles_y - 1),
    ])
}

/// Blends depth-sorted Gaussians (as produced by [`project_cloud`]) into a
/// `width × height` image.
pub fn render_forward(projected: Vec<ProjectedGaussian>, width: usize, height: usize) -> RenderOutput {
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, g) in projected.iter().enumerate() {
        if let Some([x0, x1, y0, y1]) = tile_rect(g, tiles_x, tiles_y) {
            for ty in y0..=y1 {
                for tx in x0..=x1 {
                    tiles[ty * tiles_x + tx].push(k as u32);
                }
            }
        }
    }

    struct TileResult {
        color: Vec<f64>,
        alpha: Vec<f64>,
        consumed: Vec<u32>,
        transmittance: Vec<f64>,
    }

    let results: Vec<TileResult> = (0..tiles.len())
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let list = &tiles[t];
            let n = TILE * TILE;
            let mut r = TileResult {
                color: vec![0.0; 3 * n],
                alpha: vec![0.0; n],
                consumed: vec![0; n],
                transmittance: vec![1.0; n],
            };
            for ly in 0..TILE {
                let y = ty * TILE + ly;
                if y >= height {
                    break;
                }
                for lx in 0..TILE {
                    let x = tx * TILE + lx;
                    if x >= width {
                        break;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut trans = 1.0;
                    let mut c = [0.0; 3];
                    let mut consumed = list.len();
                    for (slot, &k) in list.iter().enumerate() {
                        let g = &projected[k as usize];
                        let Some(sigma) = g.sigma_at(px, py) else {
                            continue;
                        };
                        let next = trans * (1.0 - sigma);
                        if next < MIN_TRANSMITTANCE {
                            consumed = slot;
                            break;
                        }
                        for ch in 0..3 {
                            c[ch] += g.color[ch] * sigma * trans;
                        }
                        trans = next;
                    }
                    let l = ly * TILE + lx;
                    r.color[3 * l..3 * l + 3].copy_from_slice(&c);
                    r.alpha[l] = 1.0 - trans;
                    r.consumed[l] = consumed as u32;
                    r.transmittance[l] = trans;
                }
            }
            r
        })
        .collect();

    let mut color = vec![0.0; 3 * width * height];
    let mut alpha = vec![0.0; width * height];
    let mut consumed = vec![0u32; width * height];
    let mut final_transmittance = vec![1.0; width * height];
    for (t, r) in results.iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        for ly in 0..TILE {
            let y = ty * TILE + ly;
            if y >= height {
                break;
            }
            for lx in 0..TILE {
                let x = tx * TILE + lx;
                if x >= width {
                    break;
                }
                let (l, p) = (ly * TILE + lx, y * width + x);
                color[3 * p..3 * p + 3].copy_from_slice(&r.color[3 * l..3 * l + 3]);
                alpha[p] = r.alpha[l];
                consumed[p] = r.consumed[l];
                final_transmittance[p] = r.transmittance[l];
            }
        }
    }

    RenderOutput {
        width,
        height,
        color: Image::from_vec(width, height, color).expect("buffer size"),
        alpha,
        projected,
        tiles,
        consumed,
        final_transmittance,
    }
}

/// Projects and renders in one call.
pub fn render(cloud: &GaussianCloud, colors: &[f64], camera: &CameraView) -> RenderOutput {
    render_forward(project_cloud(cloud, colors, camera), camera.width, camera.height)
}

/// Gradients with respect to one projected Gaussian's screen-space quantities.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScreenGrad {
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Reverse pass of [`render_forward`]. `d_color` is `∂L/∂C` (interleaved RGB)
/// and `d_alpha` is `∂L/∂α` per pixel. Returns one entry per projected Gaussian.
pub fn render_backward(out: &RenderOutput, d_color: &[f64], d_alpha: &[f64]) -> Vec<ScreenGrad> {
    let (width, height) = (out.width, out.height);
    assert_eq!(d_color.len(), 3 * width * height, "colour gradient shape");
    assert_eq!(d_alpha.len(), width * height, "alpha gradient shape");
    let tiles_x = out.tiles_x();

    let partials: Vec<Vec<ScreenGrad>> = (0..out.tiles.len())
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let list = &out.tiles[t];
            let mut local = vec![ScreenGrad::default(); list.len()];
            for ly in 0..TILE {
                let y = ty * TILE + ly;
                if y >= height {
                    break;
                }
                for lx in 0..TILE {
                    let x = tx * TILE + lx;
                    if x >= width {
                        break;
                    }
                    let p = y * width + x;
                    let dc = [d_color[3 * p], d_color[3 * p + 1], d_color[3 * p + 2]];
                    let da = d_alpha[p];
                    if dc == [0.0; 3] && da == 0.0 {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let t_final = out.final_transmittance[p];
                    let mut trans = t_final;
                    let mut later = [0.0; 3];
                    for slot in (0..out.consumed[p] as usize).rev() {
                        let g = &out.projected[list[slot] as usize];
                        let [u, v] = g.footprint.mean2d;
                        let [qa, qb, qc] = g.footprint.conic;
                        let (dx, dy) = (px - u, py - v);
                        let power = qa * dx * dx + 2.0 * qb * dx * dy + qc * dy * dy;
                        if power > SUPPORT {
                            continue;
                        }
                        let gauss = (-0.5 * power).exp();
                        let raw = g.opacity * gauss;
                        let sigma = raw.min(MAX_SIGMA);
                        let one_minus = 1.0 - sigma;
                        let t_before = trans / one_minus;

                        let gs = &mut local[slot];
                        let w = sigma * t_before;
                        let mut d_sigma = da * t_final / one_minus;
                        for ch in 0..3 {
                            gs.color[ch] += dc[ch] * w;
                            d_sigma += dc[ch] * (g.color[ch] * t_before - later[ch] / one_minus);
                            later[ch] += g.color[ch] * w;
                        }
                        trans = t_before;

                        if raw > MAX_SIGMA {
                            continue;
                        }
                        gs.opacity += d_sigma * gauss;
                        let d_power = -0.5 * raw * d_sigma;
                        gs.mean2d[0] += d_power * (-2.0 * (qa * dx + qb * dy));
                        gs.mean2d[1] += d_power * (-2.0 * (qb * dx + qc * dy));
                        gs.conic[0] += d_power * dx * dx;
                        gs.conic[1] += d_power * 2.0 * dx * dy;
                        gs.conic[2] += d_power * dy * dy;
                    }
                }
            }
            local
        })
        .collect();

    let mut grads = vec![ScreenGrad::default(); out.projected.len()];
    for (t, local) in partials.iter().enumerate() {
        for (slot, g) in local.iter().enumerate() {
            grads[out.tiles[t][slot] as usize].add(g);
        }
    }
    grads
}

/// Gradients with respect to the cloud parameters and per-Gaussian colours.
#[derive(Clone, Debug, PartialEq)]
pub struct CloudGrads {
    pub means: Vec<f64>,
    pub rotations: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<f64>,
    /// `‖∂L/∂μ₂d‖` in normalized device units, for densification.
    pub screen_norm: Vec<f64>,
    /// Gaussians that reached at least one tile.
    pub visible: Vec<bool>,
}

impl CloudGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![0.0; 3 * n],
            rotations: vec![0.0; 4 * n],
            log_scales: vec![0.0; 3 * n],
            opacity_logits: vec![0.0; n],
            colors: vec![0.0; 3 * n],
            screen_norm: vec![0.0; n],
            visible: vec![false; n],
        }
    }
}

/// Chains screen-space gradients back to the cloud parameters.
pub fn cloud_backward(
    cloud: &GaussianCloud,
    camera: &CameraView,
    out: &RenderOutput,
    screen: &[ScreenGrad],
) -> CloudGrads {
    assert_eq!(screen.len(), out.projected.len());
    let mut grads = CloudGrads::zeros(cloud.len());
    let mut in_tile = vec![false; out.projected.len()];
    for list in &out.tiles {
        for &k in list {
            in_tile[k as usize] = true;
        }
    }
    let per: Vec<(usize, GaussianGrad)> = out
        .projected
        .par_iter()
        .zip(screen.par_iter())
        .map(|(g, sg)| (g.source, gaussian_backward(cloud, camera, g, sg)))
        .collect();
    for ((i, gg), (k, sg)) in per.into_iter().zip(screen.iter().enumerate()) {
        grads.means[3 * i..3 * i + 3].copy_from_slice(&gg.mean);
        grads.rotations[4 * i..4 * i + 4].copy_from_slice(&gg.rotation);
        grads.log_scales[3 * i..3 * i + 3].copy_from_slice(&gg.log_scale);
        grads.opacity_logits[i] = gg.opacity_logit;
        grads.colors[3 * i..3 * i + 3].copy_from_slice(&sg.color);
        let gx = sg.mean2d[0] * 0.5 * camera.width as f64;
        let gy = sg.mean2d[1] * 0.5 * camera.height as f64;
        grads.screen_norm[i] = (gx * gx + gy * gy).sqrt();
        grads.visible[i] = in_tile[k];
    }
    grads
}

struct GaussianGrad {
    mean: [f64; 3],
    rotation: [f64; 4],
    log_scale: [f64; 3],
    opacity_logit: f64,
}

fn gaussian_backward(
    cloud: &GaussianCloud,
    camera: &CameraView,
    g: &ProjectedGaussian,
    sg: &ScreenGrad,
) -> GaussianGrad {
    let i = g.source;
    let (fx, fy) = (camera.fx, camera.fy);
    let [tx, ty, tz] = g.footprint.view;
    let w = &camera.rotation;

    // conic → projected covariance
    let [a, b, c] = g.footprint.cov2d;
    let det = a * c - b * b;
    let d2 = det * det;
    let [gq0, gq1, gq2] = sg.conic;
    let ga = gq0 * (-c * c / d2) + gq1 * (b * c / d2) + gq2 * (-b * b / d2);
    let gb = gq0 * (2.0 * b * c / d2) + gq1 * (-(a * c + b * b) / d2) + gq2 * (2.0 * a * b / d2);
    let gc = gq0 * (-b * b / d2) + gq1 * (a * b / d2) + gq2 * (-a * a / d2);
    // symmetric matrix gradient of Σ′ = T Σ Tᵀ
    let gs2 = [[ga, 0.5 * gb], [0.5 * gb, gc]];

    let j = [
        [fx / tz, 0.0, -fx * tx / (tz * tz)],
        [0.0, fy / tz, -fy * ty / (tz * tz)],
    ];
    let t = mat23_mul(&j, w);
    let cov3 = compute_cov3d(cloud.rotation(i), cloud.log_scale(i));

    // ∂L/∂Σ = Tᵀ G T
    let mut g_cov = [[0.0; 3]; 3];
    for p in 0..3 {
        for q in 0..3 {
            let mut s = 0.0;
            for r in 0..2 {
                for u in 0..2 {
                    s += t[r][p] * gs2[r][u] * t[u][q];
                }
            }
            g_cov[p][q] = s;
        }
    }
    // ∂L/∂T = 2 G T Σ
    let mut g_t = [[0.0; 3]; 2];
    for r in 0..2 {
        for q in 0..3 {
            let mut s = 0.0;
            for u in 0..2 {
                for p in 0..3 {
                    s += gs2[r][u] * t[u][p] * cov3[p][q];
                }
            }
            g_t[r][q] = 2.0 * s;
        }
    }
    // ∂L/∂J = ∂L/∂T · Wᵀ
    let mut g_j = [[0.0; 3]; 2];
    for r in 0..2 {
        for k in 0..3 {
            g_j[r][k] = (0..3).map(|q| g_t[r][q] * w[k][q]).sum();
        }
    }
    let tz2 = tz * tz;
    let tz3 = tz2 * tz;
    let mut g_view = [0.0; 3];
    g_view[0] += g_j[0][2] * (-fx / tz2);
    g_view[1] += g_j[1][2] * (-fy / tz2);
    g_view[2] += g_j[0][0] * (-fx / tz2)
        + g_j[0][2] * (2.0 * fx * tx / tz3)
        + g_j[1][1] * (-fy / tz2)
        + g_j[1][2] * (2.0 * fy * ty / tz3);
    // projected mean
    let [gu, gv] = sg.mean2d;
    g_view[0] += gu * fx / tz;
    g_view[1] += gv * fy / tz;
    g_view[2] += gu * (-fx * tx / tz2) + gv * (-fy * ty / tz2);
    let mean = [
        (0..3).map(|k| w[k][0] * g_view[k]).sum(),
        (0..3).map(|k| w[k][1] * g_view[k]).sum(),
        (0..3).map(|k| w[k][2] * g_view[k]).sum(),
    ];

    // Σ = M Mᵀ, M = R diag(s)
    let q = cloud.rotation(i);
    let rot = quat_to_matrix(q);
    let s = cloud.log_scale(i).map(f64::exp);
    let mut g_m = [[0.0; 3]; 3];
    for p in 0..3 {
        for k in 0..3 {
            g_m[p][k] = 2.0 * (0..3).map(|r| g_cov[p][r] * rot[r][k] * s[k]).sum::<f64>();
        }
    }
    let mut log_scale = [0.0; 3];
    let mut g_r = [[0.0; 3]; 3];
    for k in 0..3 {
        let gsk: f64 = (0..3).map(|p| g_m[p][k] * rot[p][k]).sum();
        log_scale[k] = gsk * s[k];
        for p in 0..3 {
            g_r[p][k] = g_m[p][k] * s[k];
        }
    }
    let rotation = quat_backward(q, &g_r);

    let alpha = sigmoid(cloud.opacity_logits[i]);
    GaussianGrad {
        mean,
        rotation,
        log_scale,
        opacity_logit: sg.opacity * alpha * (1.0 - alpha),
    }
}

/// `∂L/∂q` for the unnormalized quaternion given `∂L/∂R`.
fn quat_backward(q: [f64; 4], g: &Mat3) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let gn = [
        2.0 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1]),
        2.0 * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2.0 * x * g[1][1] - w * g[1][2]
            + z * g[2][0]
            + w * g[2][1]
            - 2.0 * x * g[2][2]),
        2.0 * (-2.0 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
            - w * g[2][0]
            + z * g[2][1]
            - 2.0 * y * g[2][2]),
        2.0 * (-2.0 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2.0 * z * g[1][1]
            + y * g[1][2]
            + x * g[2][0]
            + y * g[2][1]),
    ];
    let nq = [w, x, y, z];
    let proj: f64 = (0..4).map(|k| nq[k] * gn[k]).sum();
    [
        (gn[0] - nq[0] * proj) / n,
        (gn[1] - nq[1] * proj) / n,
        (gn[2] - nq[2] * proj) / n,
        (gn[3] - nq[3] * proj) / n,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::FEATURE_DIM;
    use crate::scene::Gaussian;

    fn axis_camera(w: usize, h: usize, f: f64) -> CameraView {
        CameraView {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
            fx: f,
            fy: f,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
            width: w,
            height: h,
        }
    }

    fn gaussian(mean: [f64; 3], log_scale: f64, opacity: f64) -> Gaussian {
        Gaussian {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [log_scale; 3],
            opacity_logit: (opacity / (1.0 - opacity)).ln(),
            feature: vec![0.0; FEATURE_DIM],
        }
    }

    #[test]
    fn identity_covariance() {
        let s = compute_cov3d([1.0, 0.0, 0.0, 0.0], [0.0; 3]);
        for i in 0..3 {
            for j in 0..3 {
                assert!((s[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn quarter_turn_swaps_axes() {
        let h = std::f64::consts::FRAC_PI_4;
        let ls = [0.1f64, 0.5, -0.3];
        let s = compute_cov3d([h.cos(), 0.0, 0.0, h.sin()], ls);
        let d = ls.map(|l| (2.0 * l).exp());
        assert!((s[0][0] - d[1]).abs() < 1e-12);
        assert!((s[1][1] - d[0]).abs() < 1e-12);
        assert!((s[2][2] - d[2]).abs() < 1e-12);
        assert!(s[0][1].abs() < 1e-12);
    }

    #[test]
    fn on_axis_projection() {
        let mut cam = axis_camera(4, 4, 1.0);
        cam.cx = 0.0;
        cam.cy = 0.0;
        let fp = project_gaussian([0.0, 0.0, 1.0], &compute_cov3d([1.0, 0.0, 0.0, 0.0], [0.0; 3]), &cam)
            .unwrap();
        assert_eq!(fp.mean2d, [0.0, 0.0]);
        assert!(project_gaussian([0.0, 0.0, -1.0], &compute_cov3d([1.0, 0.0, 0.0, 0.0], [0.0; 3]), &cam).is_none());
    }

    #[test]
    fn one_and_two_term_blends() {
        let cam = axis_camera(16, 16, 20.0);
        // centred on pixel (8, 8): its centre is at (8.5, 8.5)
        let z = 4.0;
        let x = 0.5 / 20.0 * z;
        let mut cloud = GaussianCloud::new();
        cloud.push(gaussian([x, x, z], -2.0, 0.5));
        let out = render(&cloud, &[1.0, 0.0, 0.0], &cam);
        let px = out.color.pixel(8, 8);
        assert!((px[0] - 0.5).abs() < 1e-12 && px[1] == 0.0);
        assert!((out.alpha[8 * 16 + 8] - 0.5).abs() < 1e-12);

        cloud.push(gaussian([x, x, z], -2.0, 0.5));
        let out = render(&cloud, &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0], &cam);
        assert!((out.color.pixel(8, 8)[0] - 0.5).abs() < 1e-12);
        assert!((out.alpha[8 * 16 + 8] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cam = axis_camera(8, 8, 10.0);
        let mut cloud = GaussianCloud::new();
        cloud.push(gaussian([0.0, 0.0, 3.0], -1.5, 0.6));
        let out = render(&cloud, &[0.3, 0.6, 0.9], &cam);
        let sg = render_backward(&out, &[0.0; 192], &[0.0; 64]);
        let g = cloud_backward(&cloud, &cam, &out, &sg);
        assert!(g.means.iter().chain(&g.rotations).chain(&g.log_scales).all(|v| *v == 0.0));
    }

    #[test]
    fn quaternion_gradient_matches_finite_differences() {
        let q = [0.8, -0.3, 0.4, 0.2];
        let g = [[0.3, -1.0, 0.2], [0.5, 0.7, -0.4], [1.1, 0.05, -0.6]];
        let f = |q: [f64; 4]| {
            let r = quat_to_matrix(q);
            (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| r[i][j] * g[i][j]).sum::<f64>()
        };
        let an = quat_backward(q, &g);
        for k in 0..4 {
            let (mut p, mut m) = (q, q);
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let fd = (f(p) - f(m)) / 2e-6;
            assert!((fd - an[k]).abs() < 1e-7, "component {k}: {fd} vs {}", an[k]);
        }
    }
}
