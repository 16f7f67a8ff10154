//! Real spherical harmonics up to degree 3 and sigmoid colour recovery.
//!
//! Basis ordering is (ℓ, m) row order: `(0,0), (1,-1), (1,0), (1,1), (2,-2), …, (3,3)`,
//! using the constant table common to splatting renderers (Condon–Shortley
//! signs folded into the constants). Coefficient buffers are channel-major:
//! `values[channel * (degree + 1)² + basis_index]`.

use crate::{sigmoid, Error, Result};

pub const MAX_DEGREE: usize = 3;

pub const C0: f64 = 0.282_094_791_773_878_14;
pub const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of basis functions for a given maximum degree.
#[inline]
pub const fn num_basis(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// A unit vector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Direction {
    x: f64,
    y: f64,
    z: f64,
}

impl Direction {
    /// Normalizes `v`; falls back to +z when its norm is below 1e-12.
    pub fn new(v: [f64; 3]) -> Self {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if !(n >= 1e-12) {
            return Self {
                x: 0.0,
                y: 0.0,
                z: 1.0,
            };
        }
        Self {
            x: v[0] / n,
            y: v[1] / n,
            z: v[2] / n,
        }
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.x
    }
    #[inline]
    pub fn y(&self) -> f64 {
        self.y
    }
    #[inline]
    pub fn z(&self) -> f64 {
        self.z
    }

    #[inline]
    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl std::ops::Neg for Direction {
    type Output = Direction;
    fn neg(self) -> Direction {
        Direction {
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

/// Per-channel SH coefficients for one colour function.
#[derive(Clone, Debug, PartialEq)]
pub struct ShCoefficients {
    degree: usize,
    values: Vec<f64>,
}

impl ShCoefficients {
    pub fn zeros(degree: usize) -> Result<Self> {
        check_degree(degree)?;
        Ok(Self {
            degree,
            values: vec![0.0; 3 * num_basis(degree)],
        })
    }

    pub fn from_values(degree: usize, values: Vec<f64>) -> Result<Self> {
        check_degree(degree)?;
        if values.len() != 3 * num_basis(degree) {
            return Err(Error::Dimension(format!(
                "degree {degree} needs {} coefficients, got {}",
                3 * num_basis(degree),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SH coefficients".into()));
        }
        Ok(Self { degree, values })
    }

    #[inline]
    pub fn degree(&self) -> usize {
        self.degree
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Coefficient of basis `index` in `channel`.
    #[inline]
    pub fn get(&self, channel: usize, index: usize) -> f64 {
        self.values[channel * num_basis(self.degree) + index]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, index: usize, v: f64) {
        let n = num_basis(self.degree);
        self.values[channel * n + index] = v;
    }
}

fn check_degree(degree: usize) -> Result<()> {
    if degree > MAX_DEGREE {
        return Err(Error::Argument(format!(
            "SH degree {degree} outside 0..={MAX_DEGREE}"
        )));
    }
    Ok(())
}

/// SH basis values `Y_ℓ^m(dir)` for all ℓ ≤ `degree`.
pub fn eval_sh_basis(dir: Direction, degree: usize) -> Result<Vec<f64>> {
    check_degree(degree)?;
    let mut out = vec![0.0; num_basis(degree)];
    basis_into(dir.to_array(), degree, &mut out);
    Ok(out)
}

/// Fills `out[..num_basis(degree)]`. `d` is expected to be unit length.
pub(crate) fn basis_into(d: [f64; 3], degree: usize, out: &mut [f64]) {
    let [x, y, z] = d;
    out[0] = C0;
    if degree < 1 {
        return;
    }
    out[1] = -C1 * y;
    out[2] = C1 * z;
    out[3] = -C1 * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = C2[0] * xy;
    out[5] = C2[1] * yz;
    out[6] = C2[2] * (2.0 * zz - xx - yy);
    out[7] = C2[3] * xz;
    out[8] = C2[4] * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = C3[0] * y * (3.0 * xx - yy);
    out[10] = C3[1] * xy * z;
    out[11] = C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = C3[5] * z * (xx - yy);
    out[15] = C3[6] * x * (xx - 3.0 * yy);
}

/// Gradient of each basis polynomial with respect to (x, y, z), evaluated at `d`.
pub(crate) fn basis_grad_into(d: [f64; 3], degree: usize, out: &mut [[f64; 3]]) {
    let [x, y, z] = d;
    out[0] = [0.0; 3];
    if degree < 1 {
        return;
    }
    out[1] = [0.0, -C1, 0.0];
    out[2] = [0.0, 0.0, C1];
    out[3] = [-C1, 0.0, 0.0];
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = [C2[0] * y, C2[0] * x, 0.0];
    out[5] = [0.0, C2[1] * z, C2[1] * y];
    out[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
    out[7] = [C2[3] * z, 0.0, C2[3] * x];
    out[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
    if degree < 3 {
        return;
    }
    out[9] = [
        C3[0] * 6.0 * x * y,
        C3[0] * (3.0 * xx - 3.0 * yy),
        0.0,
    ];
    out[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
    out[11] = [
        C3[2] * (-2.0 * x * y),
        C3[2] * (4.0 * zz - xx - 3.0 * yy),
        C3[2] * 8.0 * y * z,
    ];
    out[12] = [
        C3[3] * (-6.0 * x * z),
        C3[3] * (-6.0 * y * z),
        C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    out[13] = [
        C3[4] * (4.0 * zz - 3.0 * xx - yy),
        C3[4] * (-2.0 * x * y),
        C3[4] * 8.0 * x * z,
    ];
    out[14] = [C3[5] * 2.0 * x * z, -C3[5] * 2.0 * y * z, C3[5] * (xx - yy)];
    out[15] = [
        C3[6] * (3.0 * xx - 3.0 * yy),
        C3[6] * (-6.0 * x * y),
        0.0,
    ];
}

/// Per-channel logits `Σ_k values[c·n + k]·basis[k]`.
#[inline]
pub(crate) fn logits(values: &[f64], basis: &[f64]) -> [f64; 3] {
    let n = basis.len();
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let row = &values[c * n..(c + 1) * n];
        *o = row.iter().zip(basis).map(|(a, b)| a * b).sum();
    }
    out
}

/// `c = sigmoid(Σ b_ℓ^m Y_ℓ^m(dir))` per channel.
pub fn sh_to_color(coeffs: &ShCoefficients, dir: Direction) -> [f64; 3] {
    let mut basis = [0.0; 16];
    let n = num_basis(coeffs.degree);
    basis_into(dir.to_array(), coeffs.degree, &mut basis);
    let l = logits(&coeffs.values, &basis[..n]);
    [sigmoid(l[0]), sigmoid(l[1]), sigmoid(l[2])]
}

/// `∂loss/∂coeffs` given `∂loss/∂colour`, same layout as the coefficients.
pub fn sh_to_color_gradient(
    coeffs: &ShCoefficients,
    dir: Direction,
    upstream: [f64; 3],
) -> Vec<f64> {
    let n = num_basis(coeffs.degree);
    let mut basis = [0.0; 16];
    basis_into(dir.to_array(), coeffs.degree, &mut basis);
    let l = logits(&coeffs.values, &basis[..n]);
    let mut grad = vec![0.0; 3 * n];
    for c in 0..3 {
        let s = sigmoid(l[c]);
        let g = upstream[c] * s * (1.0 - s);
        for k in 0..n {
            grad[c * n + k] = g * basis[k];
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dir(rng: &mut ChaCha8Rng) -> Direction {
        loop {
            let v = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0f64),
            ];
            let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
            if n2 > 1e-3 && n2 <= 1.0 {
                return Direction::new(v);
            }
        }
    }

    #[test]
    fn direction_is_normalized() {
        let d = Direction::new([3.0, -4.0, 12.0]);
        let n = d.x() * d.x() + d.y() * d.y() + d.z() * d.z();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(Direction::new([0.0; 3]).to_array(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn degree_zero_is_the_y00_constant() {
        let b = eval_sh_basis(Direction::new([0.3, 0.1, -0.7]), 0).unwrap();
        assert_eq!(b.len(), 1);
        assert_relative_eq!(b[0], 0.5 / std::f64::consts::PI.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn band_one_on_the_z_axis() {
        let b = eval_sh_basis(Direction::new([0.0, 0.0, 1.0]), 1).unwrap();
        assert_eq!(b[1], 0.0);
        assert_relative_eq!(b[2], 0.488_602_51, epsilon = 1e-8);
        assert_eq!(b[3], 0.0);
    }

    #[test]
    fn parity_under_direction_flip() {
        let p = eval_sh_basis(Direction::new([1.0, 0.0, 0.0]), 2).unwrap();
        let n = eval_sh_basis(Direction::new([-1.0, 0.0, 0.0]), 2).unwrap();
        for k in 1..4 {
            assert_eq!(p[k], -n[k]);
        }
        for k in 4..9 {
            assert_eq!(p[k], n[k]);
        }
    }

    #[test]
    fn degree_out_of_range_is_rejected() {
        assert!(matches!(
            eval_sh_basis(Direction::new([0.0, 0.0, 1.0]), 4),
            Err(Error::Argument(_))
        ));
        assert!(ShCoefficients::zeros(4).is_err());
    }

    #[test]
    fn zero_coefficients_give_mid_grey() {
        let c = ShCoefficients::zeros(3).unwrap();
        assert_eq!(sh_to_color(&c, Direction::new([0.2, 0.4, 0.1])), [0.5; 3]);
    }

    #[test]
    fn dc_term_recovers_sigmoid() {
        let mut c = ShCoefficients::zeros(2).unwrap();
        c.set(0, 0, 1.0 / C0);
        let rgb = sh_to_color(&c, Direction::new([0.0, 1.0, 0.0]));
        assert_relative_eq!(rgb[0], 0.731_058_6, epsilon = 1e-7);
        assert_eq!(rgb[1], 0.5);
    }

    #[test]
    fn colour_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for degree in 0..=3 {
            for _ in 0..20 {
                let n = num_basis(degree);
                let values: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let coeffs = ShCoefficients::from_values(degree, values).unwrap();
                let dir = random_dir(&mut rng);
                let basis = eval_sh_basis(dir, degree).unwrap();
                let mut expected = [0.0; 3];
                for (c, e) in expected.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    let mut k = 0;
                    for l in 0..=degree as i32 {
                        for _m in -l..=l {
                            acc += coeffs.get(c, k) * basis[k];
                            k += 1;
                        }
                    }
                    *e = 1.0 / (1.0 + (-acc).exp());
                }
                let got = sh_to_color(&coeffs, dir);
                for c in 0..3 {
                    assert_relative_eq!(got[c], expected[c], epsilon = 1e-14);
                    assert!(got[c] > 0.0 && got[c] < 1.0);
                }
            }
        }
    }

    #[test]
    fn gradient_zero_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let coeffs = ShCoefficients::from_values(3, values).unwrap();
        let g = sh_to_color_gradient(&coeffs, random_dir(&mut rng), [0.0; 3]);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_dc_term_is_analytic() {
        let mut c = ShCoefficients::zeros(3).unwrap();
        c.set(1, 0, 0.7);
        let dir = Direction::new([0.1, 0.2, 0.3]);
        let up = [0.3, -1.2, 0.5];
        let g = sh_to_color_gradient(&c, dir, up);
        let s = sigmoid(0.7 * C0);
        assert_relative_eq!(g[16], up[1] * s * (1.0 - s) * C0, epsilon = 1e-15);
        assert_relative_eq!(g[0], up[0] * 0.25 * C0, epsilon = 1e-15);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for degree in [2usize, 3] {
            let n = num_basis(degree);
            let values: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let coeffs = ShCoefficients::from_values(degree, values).unwrap();
            let dir = random_dir(&mut rng);
            let up = [0.7, -0.4, 1.3];
            let loss = |c: &ShCoefficients| {
                let rgb = sh_to_color(c, dir);
                rgb[0] * up[0] + rgb[1] * up[1] + rgb[2] * up[2]
            };
            let g = sh_to_color_gradient(&coeffs, dir, up);
            let h = 1e-5;
            for i in 0..3 * n {
                let mut p = coeffs.clone();
                p.values_mut()[i] += h;
                let mut m = coeffs.clone();
                m.values_mut()[i] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                let rel = (fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1e-9);
                assert!(rel < 1e-6, "coef {i}: analytic {} fd {fd} rel {rel}", g[i]);
            }
        }
    }

    #[test]
    fn basis_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = random_dir(&mut rng).to_array();
        let mut g = [[0.0; 3]; 16];
        basis_grad_into(d, 3, &mut g);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = d;
            p[axis] += h;
            let mut m = d;
            m[axis] -= h;
            let mut bp = [0.0; 16];
            let mut bm = [0.0; 16];
            basis_into(p, 3, &mut bp);
            basis_into(m, 3, &mut bm);
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - g[k][axis]).abs() < 1e-8, "basis {k} axis {axis}");
            }
        }
    }

    #[test]
    fn band_energy_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut reference: Option<Vec<f64>> = None;
        for _ in 0..200 {
            let b = eval_sh_basis(random_dir(&mut rng), 3).unwrap();
            let energy: Vec<f64> = (0..=3usize)
                .map(|l| (l * l..(l + 1) * (l + 1)).map(|k| b[k] * b[k]).sum())
                .collect();
            match &reference {
                None => reference = Some(energy),
                Some(r) => {
                    for l in 0..=3 {
                        assert!((r[l] - energy[l]).abs() < 1e-9, "band {l}");
                    }
                }
            }
        }
    }

    #[test]
    fn monte_carlo_orthonormality() {
        // 10^6 uniformly distributed sphere points (Fibonacci lattice, a
        // low-discrepancy sequence) keep the quadrature error well under 3e-3.
        let samples = 1_000_000;
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        let mut gram = [[0.0f64; 16]; 16];
        let mut b = [0.0; 16];
        for s in 0..samples {
            let z = 1.0 - (2.0 * s as f64 + 1.0) / samples as f64;
            let phi = golden * s as f64;
            let r = (1.0 - z * z).sqrt();
            basis_into([r * phi.cos(), r * phi.sin(), z], 3, &mut b);
            for i in 0..16 {
                for j in i..16 {
                    gram[i][j] += b[i] * b[j];
                }
            }
        }
        let area = 4.0 * std::f64::consts::PI;
        for i in 0..16 {
            for j in i..16 {
                let integral = gram[i][j] * area / samples as f64;
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (integral - expected).abs() < 3e-3,
                    "<Y{i},Y{j}> = {integral}"
                );
            }
        }
    }
}
