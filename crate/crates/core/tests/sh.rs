mod common;

use common::{central_diff, relative_error, rng, sh_basis_oracle};
use proptest::prelude::*;
use rand::Rng;
use wildsplat_core::sh::{eval_sh_basis, num_basis, sh_to_color, sh_to_color_gradient, Direction, ShCoefficients};

fn random_dir(r: &mut impl Rng) -> [f64; 3] {
    loop {
        let v = [0; 3].map(|_| r.random_range(-1.0..1.0));
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-2 {
            return v;
        }
    }
}

#[test]
fn basis_matches_angular_oracle() {
    let mut r = rng(11);
    for _ in 0..200 {
        let d = random_dir(&mut r);
        for degree in 0..=3 {
            let got = eval_sh_basis(Direction::new(d), degree).unwrap();
            let want = sh_basis_oracle(d, degree);
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "degree {degree} dir {d:?}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn color_matches_summation_oracle() {
    let mut r = rng(12);
    for degree in 0..=3 {
        let n = num_basis(degree);
        let values: Vec<f64> = (0..3 * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let coeffs = ShCoefficients::from_values(degree, values.clone()).unwrap();
        let d = random_dir(&mut r);
        let basis = sh_basis_oracle(d, degree);
        let got = sh_to_color(&coeffs, Direction::new(d));
        for c in 0..3 {
            let logit: f64 = (0..n).map(|k| values[c * n + k] * basis[k]).sum();
            assert!((got[c] - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-12);
        }
    }
}

#[test]
fn color_gradient_matches_finite_differences() {
    let mut r = rng(13);
    for degree in 0..=3 {
        let n = num_basis(degree);
        let mut values: Vec<f64> = (0..3 * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let dir = Direction::new(random_dir(&mut r));
        let up = [0.3, -1.2, 0.7];
        let f = |v: &[f64]| {
            let c = sh_to_color(&ShCoefficients::from_values(degree, v.to_vec()).unwrap(), dir);
            c[0] * up[0] + c[1] * up[1] + c[2] * up[2]
        };
        let analytic = sh_to_color_gradient(&ShCoefficients::from_values(degree, values.clone()).unwrap(), dir, up);
        for i in 0..values.len() {
            let numeric = central_diff(&mut values, i, 1e-5, f);
            assert!(relative_error(&[analytic[i]], &[numeric]) < 1e-6, "degree {degree} coefficient {i}");
        }
    }
}

#[test]
fn degenerate_direction_falls_back_to_forward() {
    let a = eval_sh_basis(Direction::new([0.0; 3]), 3).unwrap();
    let b = eval_sh_basis(Direction::new([0.0, 0.0, 1.0]), 3).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn band_energy_follows_addition_theorem(x in -1.0..1.0f64, y in -1.0..1.0f64, z in -1.0..1.0f64, s in 0.1..10.0f64) {
        prop_assume!(x * x + y * y + z * z > 1e-3);
        let basis = eval_sh_basis(Direction::new([x, y, z]), 3).unwrap();
        let scaled = eval_sh_basis(Direction::new([s * x, s * y, s * z]), 3).unwrap();
        for l in 0..=3usize {
            let band = &basis[l * l..(l + 1) * (l + 1)];
            let energy: f64 = band.iter().map(|v| v * v).sum();
            prop_assert!((energy - (2 * l + 1) as f64 / (4.0 * std::f64::consts::PI)).abs() < 1e-12);
        }
        for (a, b) in basis.iter().zip(&scaled) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
