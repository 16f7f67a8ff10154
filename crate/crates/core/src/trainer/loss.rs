//! Photometric losses restricted to inlier pixels.

use crate::buffer::Image;
use crate::metrics;
use crate::{Error, Result};

fn check(pred: &Image, gt: &Image, w: &[bool]) -> Result<()> {
    if !pred.same_shape(gt) || w.len() != pred.num_pixels() {
        return Err(Error::Dimension(format!(
            "loss over {}x{} prediction, {}x{} target and {} mask entries",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height(),
            w.len()
        )));
    }
    Ok(())
}

/// Mean absolute error over all pixels and channels.
pub fn l1(pred: &Image, gt: &Image) -> f64 {
    let n = pred.data().len().max(1) as f64;
    pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
}

/// L1 averaged over the channels of inlier pixels (`w = true`), and its
/// gradient with respect to `pred`. No inliers gives zero loss.
pub fn masked_l1(pred: &Image, gt: &Image, w: &[bool]) -> Result<(f64, Vec<f64>)> {
    check(pred, gt, w)?;
    let inliers = w.iter().filter(|v| **v).count();
    let mut grad = vec![0.0; pred.data().len()];
    if inliers == 0 {
        return Ok((0.0, grad));
    }
    let n = 3.0 * inliers as f64;
    let mut loss = 0.0;
    for (p, &keep) in w.iter().enumerate() {
        if !keep {
            continue;
        }
        for c in 0..3 {
            let d = pred.data()[3 * p + c] - gt.data()[3 * p + c];
            loss += d.abs();
            grad[3 * p + c] = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
    }
    Ok((loss / n, grad))
}

/// Target with outlier pixels replaced by the prediction.
pub fn replace_outliers(gt: &Image, pred: &Image, w: &[bool]) -> Image {
    let mut out = gt.clone();
    for (p, &keep) in w.iter().enumerate() {
        if !keep {
            out.data_mut()[3 * p..3 * p + 3].copy_from_slice(&pred.data()[3 * p..3 * p + 3]);
        }
    }
    out
}

/// `(1 − SSIM(pred, target)) / 2` and its gradient with respect to `pred`.
pub fn dssim(pred: &Image, target: &Image) -> Result<(f64, Vec<f64>)> {
    let (s, mut g) = metrics::ssim_with_grad(pred, target)?;
    g.iter_mut().for_each(|v| *v *= -0.5);
    Ok(((1.0 - s) / 2.0, g))
}

/// D-SSIM against a target whose outliers are replaced by the (detached)
/// prediction.
pub fn masked_dssim(pred: &Image, gt: &Image, w: &[bool]) -> Result<(f64, Vec<f64>)> {
    check(pred, gt, w)?;
    dssim(pred, &replace_outliers(gt, pred, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::from_vec(w, h, (0..3 * w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn masked_l1_normalizes_by_inliers() {
        let pred = Image::filled(2, 1, [0.5; 3]);
        let gt = Image::from_vec(2, 1, vec![0.7, 0.7, 0.7, 0.0, 0.0, 0.0]).unwrap();
        let (l, g) = masked_l1(&pred, &gt, &[true, false]).unwrap();
        assert!((l - 0.2).abs() < 1e-15);
        assert!((g[0] + 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(&g[3..], &[0.0; 3]);
        let (l, g) = masked_l1(&pred, &gt, &[false, false]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dssim_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(16, 16, &mut rng);
        let b = random(16, 16, &mut rng);
        assert!(dssim(&a, &a).unwrap().0.abs() < 1e-12);
        let (l, g) = masked_dssim(&a, &b, &vec![false; 256]).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }
}
