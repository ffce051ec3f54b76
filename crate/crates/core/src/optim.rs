//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::velonet::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Optimizer state for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &dyn ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr` (overriding the configured one, for
    /// schedules).
    pub fn step_with_lr(&mut self, params: &mut dyn ParamStore, grads: &[Tensor], lr: f64) {
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * c.weight_decay;
        let tensors = params.tensors_mut();
        assert_eq!(tensors.len(), grads.len(), "gradient count");
        for (((p, g), m), v) in tensors.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.len(), g.len(), "gradient shape");
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }

    pub fn step(&mut self, params: &mut dyn ParamStore, grads: &[Tensor]) {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar(Tensor);
    impl ParamStore for Scalar {
        fn tensors(&self) -> Vec<&Tensor> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr·sign(g) (up to eps), before decay
        let mut p = Scalar(Tensor::vector(vec![1.0, -1.0]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(0.1) }, &p);
        opt.step(&mut p, &[Tensor::vector(vec![3.0, -0.5])]);
        assert!((p.0.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.0.data()[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let mut p = Scalar(Tensor::vector(vec![0.25, -4.0]));
        let before = p.0.clone();
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.0), &p);
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::vector(vec![1.0, 2.0])]);
        }
        assert_eq!(p.0, before);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Scalar(Tensor::vector(vec![5.0]));
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..AdamWConfig::with_lr(0.05) }, &p);
        for _ in 0..2000 {
            let x = p.0.data()[0];
            opt.step(&mut p, &[Tensor::vector(vec![2.0 * (x - 1.5)])]);
        }
        assert!((p.0.data()[0] - 1.5).abs() < 1e-3);
    }
}
