mod common;

use common::{mask_fraction_oracle, mask_oracle, rng};
use proptest::prelude::*;
use rand::Rng;
use wildsplat_core::robust_mask::{build_mask, residual_threshold, MaskConfig, MaskState};

#[test]
fn build_mask_matches_transcription() {
    let mut r = rng(31);
    let cfg = MaskConfig::default();
    for _ in 0..30 {
        let (w, h) = (r.random_range(5..40), r.random_range(5..40));
        let res: Vec<f64> = (0..w * h).map(|_| r.random_range(0.0..1.0)).collect();
        let k = r.random_range(0.0..0.6);
        assert_eq!(build_mask(&res, k, w, h, &cfg), mask_oracle(&res, k, w, h));
    }
}

#[test]
fn ties_at_the_threshold_are_inliers() {
    // quantised residuals produce many exact ties
    let mut r = rng(32);
    let cfg = MaskConfig::default();
    for _ in 0..20 {
        let res: Vec<f64> = (0..24 * 24).map(|_| r.random_range(0..4) as f64 / 4.0).collect();
        let k = r.random_range(0.05..0.4);
        assert_eq!(build_mask(&res, k, 24, 24, &cfg), mask_oracle(&res, k, 24, 24));
    }
}

#[test]
fn mask_fraction_matches_fold_over_history() {
    let mut r = rng(33);
    let cfg = MaskConfig::default();
    for _ in 0..50 {
        let mut state = MaskState::new(cfg, 3);
        let mut history = Vec::new();
        for _ in 0..r.random_range(1..40) {
            let v = r.random_range(0.0..0.5);
            state.update_stats(1, v);
            history.push(v);
        }
        let want = mask_fraction_oracle(&history, cfg.per_min, cfg.per_max);
        assert!((state.mask_fraction(1) - want).abs() < 1e-15);
        assert_eq!(state.mask_fraction(0), cfg.per_min);
    }
}

#[test]
fn fraction_endpoints() {
    let cfg = MaskConfig::default();
    let mut s = MaskState::new(cfg, 1);
    for v in [0.5, 0.1, 0.3] {
        s.update_stats(0, v);
    }
    assert!((s.mask_fraction(0) - (cfg.per_min + cfg.per_max) / 2.0).abs() < 1e-15);
    s.update_stats(0, 0.5);
    assert!((s.mask_fraction(0) - cfg.per_max).abs() < 1e-15);
    s.update_stats(0, 0.1);
    assert!((s.mask_fraction(0) - cfg.per_min).abs() < 1e-15);
}

#[test]
fn high_residual_block_is_masked() {
    let (w, h) = (64, 64);
    let mut r = rng(34);
    let mut res: Vec<f64> = (0..w * h).map(|_| r.random_range(0.0..0.05)).collect();
    let block = |x: usize, y: usize| (30..50).contains(&x) && (36..56).contains(&y);
    for y in 0..h {
        for x in 0..w {
            if block(x, y) {
                res[y * w + x] = r.random_range(0.5..1.0);
            }
        }
    }
    let m = build_mask(&res, 0.2, w, h, &MaskConfig::default());
    let (mut core_out, mut core, mut far_in, mut far) = (0, 0, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let inside = (32..48).contains(&x) && (38..54).contains(&y);
            let near = (24..56).contains(&x) && (30..62).contains(&y);
            let edge = x == 0 || y == 0 || x == w - 1 || y == h - 1;
            if inside {
                core += 1;
                core_out += !m[y * w + x] as usize;
            } else if !near && !edge {
                far += 1;
                far_in += m[y * w + x] as usize;
            }
        }
    }
    assert_eq!(core_out, core);
    assert!(far_in as f64 >= 0.99 * far as f64);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn threshold_is_non_increasing_in_k(
        res in prop::collection::vec(0.0..1.0f64, 1..400),
        k1 in 0.0..1.0f64,
        k2 in 0.0..1.0f64,
    ) {
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        prop_assert!(residual_threshold(&res, hi) <= residual_threshold(&res, lo));
    }

    #[test]
    fn upper_region_survives_blurring(seed in 0u64..10_000, k in 0.0..1.0f64) {
        let mut r = rng(seed);
        let (w, h) = (r.random_range(6..30), r.random_range(10..40));
        let res: Vec<f64> = (0..w * h).map(|_| r.random_range(0.0..1.0)).collect();
        let m = build_mask(&res, k, w, h, &MaskConfig::default());
        for y in 0..h {
            // rows at least two rows inside the upper region (window fully upper)
            if (y + 2) as f64 <= 0.4 * h as f64 {
                for x in 0..w {
                    let corner = (x == 0 || x == w - 1) && y == 0;
                    prop_assert!(m[y * w + x] || corner, "pixel ({x}, {y}) of {w}x{h}");
                }
            }
        }
    }
}
