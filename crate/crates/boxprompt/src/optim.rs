//! AdamW over a flat parameter buffer.
//!
//! Decoupled weight decay (applied directly to the parameter, not through
//! the moment estimates), bias-corrected first and second moments, and an
//! f32 round after every update so parameters stay exactly representable in
//! the checkpoint format.

use crate::util::round_f32;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(param_count: usize, lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, step: 0, m: vec![0.0; param_count], v: vec![0.0; param_count] }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Change the learning rate (used by the step-decay schedule); moment
    /// estimates are kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update: `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter count");
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let update = m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * params[i];
            params[i] = round_f32(params[i] - self.lr * update);
        }
    }
}
