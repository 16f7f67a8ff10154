//! Adam over flat parameter buffers.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
        }
    }
}

/// Moment buffers for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update of `params` with learning rate `lr`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let step_size = lr / bc1;
        let bc2_sqrt = bc2.sqrt();
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= step_size * *m / (v.sqrt() / bc2_sqrt + epsilon);
        }
    }

    /// Keeps rows where `keep[row]` is set; rows are `width` values wide.
    pub fn retain_rows(&mut self, keep: &[bool], width: usize) {
        retain_rows(&mut self.m, keep, width);
        retain_rows(&mut self.v, keep, width);
    }

    /// Appends `rows` zero-initialized rows.
    pub fn push_zero_rows(&mut self, rows: usize, width: usize) {
        self.m.extend(std::iter::repeat_n(0.0, rows * width));
        self.v.extend(std::iter::repeat_n(0.0, rows * width));
    }
}

pub(crate) fn retain_rows(buf: &mut Vec<f64>, keep: &[bool], width: usize) {
    debug_assert_eq!(buf.len(), keep.len() * width);
    let mut w = 0;
    for (row, &k) in keep.iter().enumerate() {
        if k {
            if w != row {
                buf.copy_within(row * width..(row + 1) * width, w * width);
            }
            w += 1;
        }
    }
    buf.truncate(w * width);
}
