//! Adam and global-norm gradient clipping.

use alloc::vec;
use alloc::vec::Vec;

use libm::{pow, sqrt};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_len("parameters", self.m.len(), params.len())?;
        check_len("gradients", self.m.len(), grads.len())?;
        self.t += 1;
        let c1 = 1.0 - pow(self.beta1, self.t as f64);
        let c2 = 1.0 - pow(self.beta2, self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (sqrt(v_hat) + self.eps);
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    sqrt(grads.iter().map(|g| g * g).sum())
}

/// Rescale `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= k;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut a = Adam::new(2, 1e-3);
        let mut p = [1.0, -2.0];
        a.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, [1.0, -2.0]);
        assert_eq!(a.t, 1);
    }

    #[test]
    fn first_step_is_learning_rate() {
        let mut a = Adam::new(1, 1e-3);
        let mut p = [0.0];
        a.step(&mut p, &[1.0]).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut a = Adam::new(1, 0.05);
        let mut p = [3.0];
        for _ in 0..2000 {
            let g = [2.0 * p[0]];
            a.step(&mut p, &g).unwrap();
        }
        assert!(p[0].abs() < 1e-2);
    }

    #[test]
    fn clipping() {
        let mut g = [1.2, 1.6];
        assert!((clip_global(&mut g, 1.0) - 2.0).abs() < 1e-15);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut h = [0.3, 0.4];
        clip_global(&mut h, 1.0);
        assert_eq!(h, [0.3, 0.4]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut a = Adam::new(2, 1e-3);
        assert!(a.step(&mut [0.0], &[0.0]).is_err());
    }
}
