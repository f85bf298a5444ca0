//! AdamW optimizer over shared parameters.
//!
//! Moment buffers live inside each parameter so several model structs can
//! hand the same `Parameter` to one optimizer without double-stepping: the
//! constructor deduplicates by identity.

use std::collections::HashSet;

use super::Parameter;
use crate::error::{Result, UdcError};

pub struct AdamW {
    params: Vec<Parameter>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
}

impl AdamW {
    pub fn new(params: Vec<Parameter>, lr: f64, weight_decay: f64) -> Self {
        let mut seen = HashSet::new();
        let params = params.into_iter().filter(|p| seen.insert(p.ptr_id())).collect();
        AdamW { params, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0 }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// One decoupled-weight-decay Adam step over every trainable parameter.
    ///
    /// A non-finite gradient anywhere aborts before touching any state, so a
    /// diverging loss fails loudly instead of poisoning the moments.
    pub fn step(&mut self) -> Result<()> {
        for p in &self.params {
            let inner = p.borrow();
            if !inner.requires_grad {
                continue;
            }
            if let Some(bad) = inner.grad.data().iter().find(|g| !g.is_finite()) {
                return Err(UdcError::NonFinite(format!(
                    "gradient of '{}' is {} at step {}",
                    inner.name,
                    bad,
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - self.lr * self.weight_decay;
        for p in &self.params {
            let inner = &mut *p.borrow_mut();
            if !inner.requires_grad {
                continue;
            }
            let grad = inner.grad.data();
            let m = inner.m.data_mut();
            let v = inner.v.data_mut();
            let w = inner.value.data_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] = w[i] * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
