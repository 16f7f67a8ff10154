//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the code under test beyond plain data types; the
//! oracles are written from the definitions with straightforward loops.

#![allow(dead_code)]

pub mod gradcheck;

use nalgebra::{Matrix2, Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wildsplat_core::scene::{CameraView, Gaussian, GaussianCloud};
use wildsplat_core::FEATURE_DIM;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Spherical harmonics

fn factorial(n: usize) -> f64 {
    (1..=n).map(|v| v as f64).product()
}

/// Associated Legendre `P_ℓ^m(x)` with the Condon–Shortley phase, by the
/// standard three-term recurrence.
fn legendre(l: usize, m: usize, x: f64) -> f64 {
    let mut pmm = 1.0;
    let s = (1.0 - x * x).max(0.0).sqrt();
    for i in 0..m {
        pmm *= -((2 * i + 1) as f64) * s;
    }
    if l == m {
        return pmm;
    }
    let mut pmm1 = x * (2 * m + 1) as f64 * pmm;
    if l == m + 1 {
        return pmm1;
    }
    let mut out = 0.0;
    for ll in m + 2..=l {
        out = ((2 * ll - 1) as f64 * x * pmm1 - (ll + m - 1) as f64 * pmm) / (ll - m) as f64;
        pmm = pmm1;
        pmm1 = out;
    }
    out
}

/// Real SH basis, ordered `ℓ² + ℓ + m`, evaluated from spherical angles.
pub fn sh_basis_oracle(dir: [f64; 3], degree: usize) -> Vec<f64> {
    let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let (x, y, z) = (dir[0] / n, dir[1] / n, dir[2] / n);
    let theta = z.clamp(-1.0, 1.0).acos();
    let phi = y.atan2(x);
    let mut out = Vec::new();
    for l in 0..=degree {
        for m in -(l as i64)..=(l as i64) {
            let am = m.unsigned_abs() as usize;
            let k = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI) * factorial(l - am) / factorial(l + am)).sqrt();
            let p = legendre(l, am, theta.cos());
            let v = match m {
                0 => k * p,
                m if m > 0 => std::f64::consts::SQRT_2 * k * p * (m as f64 * phi).cos(),
                m => std::f64::consts::SQRT_2 * k * p * ((-m) as f64 * phi).sin(),
            };
            out.push(v);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Rasterization

/// Per-pixel renderer without tiles: every Gaussian is projected with
/// nalgebra, all of them are sorted by `(depth, index)`, and each pixel
/// blends the whole list. Returns `(rgb, alpha)`.
pub fn brute_force_render(cloud: &GaussianCloud, colors: &[f64], cam: &CameraView) -> (Vec<f64>, Vec<f64>) {
    let w_rot = Matrix3::from_fn(|i, j| cam.rotation[i][j]);
    let t = Vector3::from(cam.translation);
    struct Splat {
        depth: f64,
        index: usize,
        mean: [f64; 2],
        q: Matrix2<f64>,
        opacity: f64,
    }
    let mut splats = Vec::new();
    for i in 0..cloud.len() {
        let g = cloud.gaussian(i);
        let p = w_rot * Vector3::from(g.mean) + t;
        if p.z <= 0.01 {
            continue;
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(
            g.rotation[0],
            g.rotation[1],
            g.rotation[2],
            g.rotation[3],
        ));
        let r = q.to_rotation_matrix().into_inner();
        let s = Matrix3::from_diagonal(&Vector3::from(g.log_scale.map(f64::exp)));
        let sigma = r * s * s.transpose() * r.transpose();
        let j = nalgebra::Matrix2x3::new(
            cam.fx / p.z,
            0.0,
            -cam.fx * p.x / (p.z * p.z),
            0.0,
            cam.fy / p.z,
            -cam.fy * p.y / (p.z * p.z),
        );
        let m = j * w_rot;
        let cov = m * sigma * m.transpose() + Matrix2::identity() * 0.3;
        splats.push(Splat {
            depth: p.z,
            index: i,
            mean: [cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy],
            q: cov.try_inverse().expect("blurred covariance is invertible"),
            opacity: 1.0 / (1.0 + (-g.opacity_logit).exp()),
        });
    }
    splats.sort_by(|a, b| a.depth.partial_cmp(&b.depth).unwrap().then(a.index.cmp(&b.index)));

    let (w, h) = (cam.width, cam.height);
    let mut rgb = vec![0.0; 3 * w * h];
    let mut alpha = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut trans = 1.0;
            let mut c = [0.0; 3];
            for s in &splats {
                let d = nalgebra::Vector2::new(x as f64 + 0.5 - s.mean[0], y as f64 + 0.5 - s.mean[1]);
                let power = (d.transpose() * s.q * d)[0];
                if power > 9.0 {
                    continue;
                }
                let a = (s.opacity * (-0.5 * power).exp()).min(0.999);
                if trans * (1.0 - a) < 1e-4 {
                    break;
                }
                for k in 0..3 {
                    c[k] += colors[3 * s.index + k] * a * trans;
                }
                trans *= 1.0 - a;
            }
            let p = y * w + x;
            rgb[3 * p..3 * p + 3].copy_from_slice(&c);
            alpha[p] = 1.0 - trans;
        }
    }
    (rgb, alpha)
}

/// Camera on a sphere of radius `dist` looking at the origin.
pub fn orbit_camera(rng: &mut impl Rng, dist: f64, width: usize, height: usize) -> CameraView {
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let el = rng.random_range(-0.5..0.5f64);
    let eye = [dist * el.cos() * az.cos(), dist * el.sin(), dist * el.cos() * az.sin()];
    let f = 0.5 * width as f64 / (25f64.to_radians()).tan();
    CameraView::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], f, width, height).unwrap()
}

/// Random Gaussians in a ball of `radius` with screen sizes of a few pixels.
pub fn random_cloud(rng: &mut impl Rng, n: usize, radius: f64, log_scale: std::ops::Range<f64>) -> GaussianCloud {
    let mut cloud = GaussianCloud::new();
    for _ in 0..n {
        let mut q = [0.0; 4];
        q.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        if q.iter().map(|v| v * v).sum::<f64>() < 1e-3 {
            q = [1.0, 0.0, 0.0, 0.0];
        }
        cloud.push(Gaussian {
            mean: [0; 3].map(|_| rng.random_range(-radius..radius)),
            rotation: q,
            log_scale: [0; 3].map(|_| rng.random_range(log_scale.clone())),
            opacity_logit: rng.random_range(-2.0..3.0),
            feature: (0..FEATURE_DIM).map(|_| rng.random_range(-0.5..0.5)).collect(),
        });
    }
    cloud
}

pub fn random_colors(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect()
}

// ---------------------------------------------------------------------------
// SSIM

/// SSIM by explicit 11×11 window sums at every valid position, averaged over
/// positions and channels.
pub fn ssim_loop(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let sigma: f64 = 1.5;
    let g: Vec<f64> = (0..11)
        .map(|i| {
            let d = i as f64 - 5.0;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..3 {
        for oy in 0..=(h - 11) {
            for ox in 0..=(w - 11) {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wt = g[i] * g[j] / (gs * gs);
                        let p = (oy + i) * w + ox + j;
                        let (va, vb) = (a[3 * p + ch], b[3 * p + ch]);
                        ma += wt * va;
                        mb += wt * vb;
                        saa += wt * va * va;
                        sbb += wt * vb * vb;
                        sab += wt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

// ---------------------------------------------------------------------------
// Robust mask

/// Outlier fraction from a per-image loss history: min, max and last value
/// folded over the sequence, then linearly mapped to `[per_min, per_max]`.
pub fn mask_fraction_oracle(history: &[f64], per_min: f64, per_max: f64) -> f64 {
    let (lo, hi, cur) = history
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY, f64::NAN), |(lo, hi, _), &v| {
            (lo.min(v), hi.max(v), v)
        });
    if hi == lo {
        per_min
    } else {
        (cur - lo) / (hi - lo) * (per_max - per_min) + per_min
    }
}

/// Inlier mask from residuals: sorted lower percentile, upper-region
/// override, explicit 5×5 zero-padded box filter, threshold 0.4.
pub fn mask_oracle(residuals: &[f64], k: f64, w: usize, h: usize) -> Vec<bool> {
    let mut sorted = residuals.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((1.0 - k) * (sorted.len() - 1) as f64).floor() as usize;
    let t = sorted[idx];
    let mut labels = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let upper = y as f64 <= 0.4 * h as f64;
            labels[y * w + x] = if residuals[y * w + x] <= t || upper { 1.0 } else { 0.0 };
        }
    }
    let mut out = vec![false; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut s = 0.0;
            for dy in -2..=2 {
                for dx in -2..=2 {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx >= 0 && yy >= 0 && xx < w as i64 && yy < h as i64 {
                        s += labels[(yy * w as i64 + xx) as usize];
                    }
                }
            }
            out[(y * w as i64 + x) as usize] = s / 25.0 >= 0.4;
        }
    }
    out
}

/// Background residual mask: `M` (mean absolute difference below the
/// threshold), `M′` (3×3 zero-padded box mean), selection `M′ > 0.6`.
pub fn background_mask_oracle(gt: &[f64], bg: &[f64], w: usize, h: usize, threshold: f64) -> (Vec<bool>, Vec<f64>, Vec<bool>) {
    let m: Vec<bool> = (0..w * h)
        .map(|p| (0..3).map(|c| (gt[3 * p + c] - bg[3 * p + c]).abs()).sum::<f64>() / 3.0 < threshold)
        .collect();
    let mut filtered = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (xx, yy) = (x + dx, y + dy);
                    if xx >= 0 && yy >= 0 && xx < w as i64 && yy < h as i64 && m[(yy * w as i64 + xx) as usize] {
                        s += 1.0;
                    }
                }
            }
            filtered[(y * w as i64 + x) as usize] = s / 9.0;
        }
    }
    let selected = filtered.iter().map(|v| *v > 0.6).collect();
    (m, filtered, selected)
}

// ---------------------------------------------------------------------------
// MLP

/// Plain-loop forward pass for the flat `W₀, b₀, W₁, b₁, …` layout with
/// row-major `in × out` weights, ReLU on hidden layers.
pub fn mlp_oracle(sizes: &[usize], params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut off = 0;
    for l in 0..sizes.len() - 1 {
        let (inp, out) = (sizes[l], sizes[l + 1]);
        let wt = &params[off..off + inp * out];
        let b = &params[off + inp * out..off + inp * out + out];
        off += inp * out + out;
        let mut next = vec![0.0; out];
        for o in 0..out {
            let mut s = b[o];
            for i in 0..inp {
                s += h[i] * wt[i * out + o];
            }
            next[o] = if l + 2 < sizes.len() { s.max(0.0) } else { s };
        }
        h = next;
    }
    h
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central difference of `f` with respect to `params[i]`; restores the value.
pub fn central_diff(params: &mut [f64], i: usize, step: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = params[i];
    params[i] = orig + step;
    let hi = f(params);
    params[i] = orig - step;
    let lo = f(params);
    params[i] = orig;
    (hi - lo) / (2.0 * step)
}

/// `‖a − n‖ / ‖n‖` over a parameter class, with `‖a‖` as the denominator
/// when the numerical gradient vanishes.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = nn.max(na);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
