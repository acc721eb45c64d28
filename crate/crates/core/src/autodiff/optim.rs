use serde::{Deserialize, Serialize};

use super::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moment estimates. Not differentiable; used for outer/plain updates only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one bias-corrected Adam update in place.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut ParamVector, grad: &[f64]) {
        assert_eq!(grad.len(), params.len(), "gradient length does not match parameters");
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, p) in params.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamLayout;
    use std::sync::Arc;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut l = ParamLayout::new();
        l.push("x", 1, 2);
        let mut p = ParamVector::from_data(Arc::new(l), vec![1.0, 1.0]).unwrap();
        let mut s = AdamState::new(2);
        s.step(&AdamConfig::with_lr(0.1), &mut p, &[3.0, -0.5]);
        assert!((p.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.data()[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut l = ParamLayout::new();
        l.push("x", 1, 1);
        let mut p = ParamVector::from_data(Arc::new(l), vec![5.0]).unwrap();
        let mut s = AdamState::new(1);
        for _ in 0..2000 {
            let g = 2.0 * (p.data()[0] - 2.0);
            s.step(&AdamConfig::with_lr(0.05), &mut p, &[g]);
        }
        assert!((p.data()[0] - 2.0).abs() < 1e-3);
    }
}
