//! PSNR and SSIM on linear RGB buffers in [0, 1].
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5) evaluated at every position
//! where the window fits entirely inside the image, with `C1 = 0.01²` and
//! `C2 = 0.03²`, averaged over positions and channels. Images smaller than
//! the window fall back to a single window of global statistics.

use crate::buffer::Image;
use crate::{Error, Result};

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn check(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "comparing {}x{} with {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)`; `+∞` for identical buffers.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m))
}

pub fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

/// Formats a PSNR value, writing `inf` for identical images.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.3}")
    }
}

/// Normalized 1D Gaussian window.
pub fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let half = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    Ok(ssim_impl(a, b, false).0)
}

/// SSIM and `∂SSIM/∂a` (interleaved like the image data).
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    check(a, b)?;
    let (s, g) = ssim_impl(a, b, true);
    Ok((s, g.expect("requested")))
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data().iter().skip(c).step_by(3).copied().collect()
}

/// Valid-mode separable filtering: `w × h` → `(w − 10) × (h − 10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = (0..WINDOW).map(|i| k[i] * row[x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a `(w − 10) × (h − 10)` map back to `w × h`.
fn filter_adjoint(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for i in 0..WINDOW {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..WINDOW {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

struct Local {
    s: f64,
    d_mu_a: f64,
    d_var_a: f64,
    d_cov: f64,
}

#[inline]
fn local_ssim(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> Local {
    let n1 = 2.0 * mu_a * mu_b + C1;
    let n2 = 2.0 * cov + C2;
    let d1 = mu_a * mu_a + mu_b * mu_b + C1;
    let d2 = var_a + var_b + C2;
    let s = n1 * n2 / (d1 * d2);
    Local {
        s,
        d_mu_a: 2.0 * mu_b * n2 / (d1 * d2) - s * 2.0 * mu_a / d1,
        d_var_a: -s / d2,
        d_cov: 2.0 * n1 / (d1 * d2),
    }
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (w, h) = (a.width(), a.height());
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; a.data().len()]);
    if w < WINDOW || h < WINDOW {
        let n = (w * h) as f64;
        for c in 0..3 {
            let pa = plane(a, c);
            let pb = plane(b, c);
            let mu_a = pa.iter().sum::<f64>() / n;
            let mu_b = pb.iter().sum::<f64>() / n;
            let var_a = pa.iter().map(|v| (v - mu_a) * (v - mu_a)).sum::<f64>() / n;
            let var_b = pb.iter().map(|v| (v - mu_b) * (v - mu_b)).sum::<f64>() / n;
            let cov = pa.iter().zip(&pb).map(|(x, y)| (x - mu_a) * (y - mu_b)).sum::<f64>() / n;
            let l = local_ssim(mu_a, mu_b, var_a, var_b, cov);
            total += l.s / 3.0;
            if let Some(g) = grad.as_mut() {
                for p in 0..w * h {
                    g[3 * p + c] = (l.d_mu_a / n
                        + l.d_var_a * 2.0 * (pa[p] - mu_a) / n
                        + l.d_cov * (pb[p] - mu_b) / n)
                        / 3.0;
                }
            }
        }
        return (total, grad);
    }

    let k = gaussian_window();
    let count = ((w + 1 - WINDOW) * (h + 1 - WINDOW)) as f64;
    for c in 0..3 {
        let pa = plane(a, c);
        let pb = plane(b, c);
        let sq_a: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let sq_b: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let e_aa = filter_valid(&sq_a, w, h, &k);
        let e_bb = filter_valid(&sq_b, w, h, &k);
        let e_ab = filter_valid(&ab, w, h, &k);
        let m = mu_a.len();
        let mut g_mu = vec![0.0; m];
        let mut g_aa = vec![0.0; m];
        let mut g_ab = vec![0.0; m];
        for i in 0..m {
            let var_a = e_aa[i] - mu_a[i] * mu_a[i];
            let var_b = e_bb[i] - mu_b[i] * mu_b[i];
            let cov = e_ab[i] - mu_a[i] * mu_b[i];
            let l = local_ssim(mu_a[i], mu_b[i], var_a, var_b, cov);
            total += l.s / (3.0 * count);
            // In terms of the filtered moments E[a], E[a²], E[ab].
            g_mu[i] = (l.d_mu_a - 2.0 * mu_a[i] * l.d_var_a - mu_b[i] * l.d_cov) / (3.0 * count);
            g_aa[i] = l.d_var_a / (3.0 * count);
            g_ab[i] = l.d_cov / (3.0 * count);
        }
        if let Some(g) = grad.as_mut() {
            let s_mu = filter_adjoint(&g_mu, w, h, &k);
            let s_aa = filter_adjoint(&g_aa, w, h, &k);
            let s_ab = filter_adjoint(&g_ab, w, h, &k);
            for p in 0..w * h {
                g[3 * p + c] = s_mu[p] + 2.0 * pa[p] * s_aa[p] + pb[p] * s_ab[p];
            }
        }
    }
    (total, grad)
}
