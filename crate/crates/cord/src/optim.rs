//! AdamW with decoupled weight decay.

use crate::error::{CordError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moment accumulators plus the shared step counter.
pub struct OptimState<F: Scalar> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> OptimState<F> {
    pub fn new(config: AdamWConfig, params: &[Tensor<F>]) -> Self {
        OptimState {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
        }
    }

    /// One AdamW update in place. Weight decay is decoupled: it scales the
    /// parameter directly and never enters the moment estimates.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(CordError::ShapeMismatch(
                "optimizer parameter/gradient count".into(),
            ));
        }
        for ((p, g), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(self.m.iter().zip(&self.v))
        {
            if !p.same_shape(g) || !p.same_shape(m) || !p.same_shape(v) {
                return Err(CordError::ShapeMismatch(
                    "optimizer parameter/gradient shape".into(),
                ));
            }
            g.check_finite("gradient passed to optimizer")?;
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let (b1, b2) = (F::from_f64_(c.beta1), F::from_f64_(c.beta2));
        let lr = F::from_f64_(c.lr);
        let eps = F::from_f64_(c.eps);
        let decay = F::from_f64_(1.0 - c.lr * c.weight_decay);
        let bc1 = F::from_f64_(1.0 - c.beta1.powi(t));
        let bc2 = F::from_f64_(1.0 - c.beta2.powi(t));

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (F::one() - b1) * gi;
                v.data[i] = b2 * v.data[i] + (F::one() - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] = p.data[i] * decay - lr * mhat / (vhat.sqrt() + eps);
            }
            p.check_finite("parameter after optimizer step")?;
        }
        Ok(())
    }
}
