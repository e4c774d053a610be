use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// A trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for an ordered list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of every trainable parameter, at learning rate `lr`.
    /// Parameters must be passed in the same order on every call.
    pub fn step(&mut self, params: &mut [&mut Parameter], lr: f64) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "parameter list changed between steps");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            assert_eq!(m.shape(), p.value.shape(), "moment shape drifted");
            if !p.trainable {
                continue;
            }
            let grads = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * g;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
                let mhat = md[i] / c1;
                let vhat = vd[i] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Parameter::new(Tensor::full(&[3], 0.7));
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut [&mut p], 0.1);
        }
        assert_eq!(p.value.data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = -lr / (1 + eps).
        let mut p = Parameter::new(Tensor::scalar(0.0));
        p.grad = Tensor::scalar(1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut [&mut p], 0.1);
        assert!((p.value.item() + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut p = Parameter::new(Tensor::from_fn(&[4], |i| i as f64));
            let mut adam = AdamState::new(AdamConfig::default());
            for k in 0..10 {
                p.grad = Tensor::from_fn(&[4], |i| ((i + k) as f64).sin());
                adam.step(&mut [&mut p], 0.01);
            }
            p.value
        };
        assert_eq!(run(), run());
    }
}
