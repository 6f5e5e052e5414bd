use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// Moment constants as used for the reference fine-tuning setup. The
    /// learning rate is the desk-scale default for training from scratch.
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every tensor of one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Self {
        let zeros = |t: &crate::tensor::Tensor<S>| vec![S::zero(); t.numel()];
        Self {
            config,
            step: 0,
            m: params.iter().map(|(_, _, t)| zeros(t)).collect(),
            v: params.iter().map(|(_, _, t)| zeros(t)).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update from the gradients currently held by
    /// `params`. Tensors without a gradient buffer are treated as zero-grad.
    /// Gradients are left in place; the caller zeroes them.
    pub fn step(&mut self, params: &mut ParamStore<S>) {
        assert_eq!(self.m.len(), params.len(), "optimizer/param store mismatch");
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let lr = S::lit(c.lr);
        let eps = S::lit(c.eps);
        let t = self.step as i32;
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);
        for ((tensor, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let n = tensor.numel();
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![S::zero(); n],
            };
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let gi = grad[i];
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(params: &mut ParamStore<S>, max_norm: S) -> S {
    let norm = params.grad_norm();
    if norm > max_norm && norm > S::zero() {
        let scale = max_norm / norm;
        for t in params.iter_mut() {
            if t.grad().is_some() {
                t.grad_mut().iter_mut().for_each(|g| *g *= scale);
            }
        }
    }
    norm
}
