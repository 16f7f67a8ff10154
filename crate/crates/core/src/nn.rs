//! Small fully-connected networks with hand-written reverse mode.
//!
//! Parameters of all layers live in one flat buffer (`W₀, b₀, W₁, b₁, …`,
//! weights row-major `in × out`) so an optimizer can treat a network as a
//! single parameter group. Hidden layers use ReLU, the output layer is linear.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::{Error, Result};

/// Rows per work item. Fixed so reductions happen in the same order on any machine.
const CHUNK_ROWS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Activations retained by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    batch: usize,
    /// Input of every layer (the network input, then each hidden ReLU output).
    layer_inputs: Vec<Vec<f64>>,
}

fn layer_param_count(inp: usize, out: usize) -> usize {
    inp * out + out
}

/// `c[m×n] (+)= a[m×k] · b[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c`
    // (checked by the callers' debug asserts on buffer lengths).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    /// All-zero network with the given layer widths `[input, hidden…, output]`.
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs an input and an output width");
        let n = sizes.windows(2).map(|w| layer_param_count(w[0], w[1])).sum();
        Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; n],
        }
    }

    /// He-normal hidden layers, zero biases, and a zero final layer.
    pub fn init_he<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut mlp = Self::zeros(sizes);
        let layers = mlp.num_layers();
        for l in 0..layers - 1 {
            let (inp, _) = mlp.layer_shape(l);
            let normal = Normal::new(0.0, (2.0 / inp as f64).sqrt()).expect("valid std");
            let (w, _) = mlp.layer_params_mut(l);
            for v in w.iter_mut() {
                *v = normal.sample(rng);
            }
        }
        mlp
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let mlp = Self::zeros(sizes);
        if params.len() != mlp.params.len() {
            return Err(Error::Dimension(format!(
                "MLP {sizes:?} has {} parameters, got {}",
                mlp.params.len(),
                params.len()
            )));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    #[inline]
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    #[inline]
    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    #[inline]
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    #[inline]
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layer_shape(&self, layer: usize) -> (usize, usize) {
        (self.sizes[layer], self.sizes[layer + 1])
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.sizes[..layer + 1]
            .windows(2)
            .map(|w| layer_param_count(w[0], w[1]))
            .sum()
    }

    /// `(weights, bias)` of one layer.
    pub fn layer_params(&self, layer: usize) -> (&[f64], &[f64]) {
        let (inp, out) = self.layer_shape(layer);
        let off = self.layer_offset(layer);
        let (w, b) = self.params[off..off + inp * out + out].split_at(inp * out);
        (w, b)
    }

    pub fn layer_params_mut(&mut self, layer: usize) -> (&mut [f64], &mut [f64]) {
        let (inp, out) = self.layer_shape(layer);
        let off = self.layer_offset(layer);
        let (w, b) = self.params[off..off + inp * out + out].split_at_mut(inp * out);
        (w, b)
    }

    fn layer_forward(&self, layer: usize, x: &[f64], batch: usize, relu: bool) -> Vec<f64> {
        let (inp, out) = self.layer_shape(layer);
        let (w, b) = self.layer_params(layer);
        debug_assert_eq!(x.len(), batch * inp);
        let mut y = vec![0.0; batch * out];
        y.par_chunks_mut(CHUNK_ROWS * out)
            .zip(x.par_chunks(CHUNK_ROWS * inp))
            .for_each(|(yc, xc)| {
                let rows = xc.len() / inp;
                for r in 0..rows {
                    yc[r * out..(r + 1) * out].copy_from_slice(b);
                }
                gemm(rows, inp, out, xc, (inp as isize, 1), w, (out as isize, 1), 1.0, yc);
                if relu {
                    for v in yc.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            });
        y
    }

    /// Batched inference without retaining activations. `x` is `batch × input_dim`.
    pub fn infer(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in 0..self.num_layers() {
            h = self.layer_forward(l, &h, batch, l + 1 < self.num_layers());
        }
        h
    }

    /// Batched forward pass that keeps what [`Mlp::backward`] needs.
    pub fn forward(&self, x: &[f64], batch: usize) -> (Vec<f64>, MlpTape) {
        let mut layer_inputs = Vec::with_capacity(self.num_layers());
        let mut h = x.to_vec();
        for l in 0..self.num_layers() {
            let next = self.layer_forward(l, &h, batch, l + 1 < self.num_layers());
            layer_inputs.push(h);
            h = next;
        }
        (h, MlpTape { batch, layer_inputs })
    }

    /// Accumulates `∂L/∂params` into `grad_params` and returns `∂L/∂x`.
    pub fn backward(&self, tape: &MlpTape, d_out: &[f64], grad_params: &mut [f64]) -> Vec<f64> {
        assert_eq!(grad_params.len(), self.params.len());
        let batch = tape.batch;
        let mut dy = d_out.to_vec();
        let mut offsets = Vec::with_capacity(self.num_layers());
        for l in 0..self.num_layers() {
            offsets.push(self.layer_offset(l));
        }
        for l in (0..self.num_layers()).rev() {
            let (inp, out) = self.layer_shape(l);
            let x = &tape.layer_inputs[l];
            let (w, _) = self.layer_params(l);
            debug_assert_eq!(dy.len(), batch * out);

            // Per-chunk weight/bias partials, reduced in chunk order.
            let partials: Vec<Vec<f64>> = dy
                .par_chunks(CHUNK_ROWS * out)
                .zip(x.par_chunks(CHUNK_ROWS * inp))
                .map(|(dyc, xc)| {
                    let rows = xc.len() / inp;
                    let mut g = vec![0.0; inp * out + out];
                    let (gw, gb) = g.split_at_mut(inp * out);
                    gemm(inp, rows, out, xc, (1, inp as isize), dyc, (out as isize, 1), 0.0, gw);
                    for r in 0..rows {
                        for (b, d) in gb.iter_mut().zip(&dyc[r * out..(r + 1) * out]) {
                            *b += d;
                        }
                    }
                    g
                })
                .collect();
            let gl = &mut grad_params[offsets[l]..offsets[l] + inp * out + out];
            for p in &partials {
                for (a, b) in gl.iter_mut().zip(p) {
                    *a += b;
                }
            }

            let mut dx = vec![0.0; batch * inp];
            dx.par_chunks_mut(CHUNK_ROWS * inp)
                .zip(dy.par_chunks(CHUNK_ROWS * out))
                .for_each(|(dxc, dyc)| {
                    let rows = dyc.len() / out;
                    gemm(rows, out, inp, dyc, (out as isize, 1), w, (1, out as isize), 0.0, dxc);
                });
            if l > 0 {
                // ReLU: the stored layer input is the activation output.
                for (d, &a) in dx.iter_mut().zip(x.iter()) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            dy = dx;
        }
        dy
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_forward(mlp: &Mlp, x: &[f64], batch: usize) -> Vec<f64> {
        let mut h: Vec<Vec<f64>> = x.chunks(mlp.input_dim()).map(|r| r.to_vec()).collect();
        assert_eq!(h.len(), batch);
        for l in 0..mlp.num_layers() {
            let (inp, out) = mlp.layer_shape(l);
            let (w, b) = mlp.layer_params(l);
            h = h
                .iter()
                .map(|row| {
                    (0..out)
                        .map(|o| {
                            let mut acc = b[o];
                            for i in 0..inp {
                                acc += row[i] * w[i * out + o];
                            }
                            if l + 1 < mlp.num_layers() {
                                acc.max(0.0)
                            } else {
                                acc
                            }
                        })
                        .collect()
                })
                .collect();
        }
        h.concat()
    }

    fn random_mlp(sizes: &[usize], seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mlp = Mlp::init_he(sizes, &mut rng);
        for v in mlp.params_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        mlp
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mlp = random_mlp(&[7, 16, 9, 5], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = 600;
        let x: Vec<f64> = (0..batch * 7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = mlp.infer(&x, batch);
        let want = naive_forward(&mlp, &x, batch);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        let (taped, _) = mlp.forward(&x, batch);
        assert_eq!(taped, got);
    }

    #[test]
    fn zero_final_layer_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::init_he(&[4, 8, 8, 3], &mut rng);
        let out = mlp.infer(&[0.3, -0.1, 0.5, 2.0], 1);
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn backward_matches_central_differences() {
        let mlp = random_mlp(&[5, 12, 8, 4], 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let batch = 3;
        let x: Vec<f64> = (0..batch * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let up: Vec<f64> = (0..batch * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |m: &Mlp, x: &[f64]| -> f64 {
            m.infer(x, batch).iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = mlp.forward(&x, batch);
        let mut gp = vec![0.0; mlp.params().len()];
        let gx = mlp.backward(&tape, &up, &mut gp);
        let h = 1e-6;
        for i in 0..mlp.params().len() {
            let mut p = mlp.clone();
            p.params_mut()[i] += h;
            let mut m = mlp.clone();
            m.params_mut()[i] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - gp[i]).abs() < 1e-7 * (1.0 + fd.abs()), "param {i}");
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let fd = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
            assert!((fd - gx[i]).abs() < 1e-7 * (1.0 + fd.abs()), "input {i}");
        }
    }
}
