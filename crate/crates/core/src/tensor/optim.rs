//! AdamW with decoupled weight decay and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub warmup_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            peak_lr: 4e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            eps: 1e-8,
            warmup_steps: 3000,
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup_steps`, then cosine decay to 0
/// at `total_steps`.
pub fn lr_at_step(step: u64, peak: f64, warmup_steps: u64, total_steps: u64) -> Result<f64> {
    if warmup_steps > total_steps {
        return Err(Error::config(format!(
            "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::config(format!(
            "step {step} is past total_steps {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(peak * step as f64 / warmup_steps as f64);
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Per-parameter moment accumulators and the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    decay_exempt: Vec<bool>,
}

pub type AdamW<T> = OptimizerState<T>;

impl<T: Scalar> OptimizerState<T> {
    /// `decay_exempt[i]` marks parameter `i` as a normalization gain or bias.
    pub fn new(config: OptimizerConfig, params: &[Tensor<T>], decay_exempt: Vec<bool>) -> Self {
        assert_eq!(params.len(), decay_exempt.len());
        OptimizerState {
            config,
            step: 0,
            first: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            decay_exempt,
        }
    }

    pub fn is_exempt(&self, index: usize) -> bool {
        self.decay_exempt[index]
    }

    /// One AdamW update at learning rate `lr`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let g = g
                .as_ref()
                .ok_or_else(|| Error::Usage(format!("missing gradient for parameter {i}")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim(format!(
                    "gradient {:?} vs parameter {:?} at index {i}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let lr_t = T::of(lr);
        let eps = T::of(c.eps);
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g.as_ref().unwrap();
            let decay = if self.decay_exempt[i] {
                T::zero()
            } else {
                T::of(lr * c.weight_decay)
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] * inv_bc1;
                let v_hat = v[j] * inv_bc2;
                *w = *w - decay * *w - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
