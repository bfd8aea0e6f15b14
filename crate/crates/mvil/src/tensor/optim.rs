//! AdamW with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moment slots plus a shared step counter.
/// Learning rates are per parameter so encoder and fusion groups can
/// be stepped together at different rates.
#[derive(Debug)]
pub struct AdamW {
    hp: AdamWParams,
    lr: Vec<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, hp: AdamWParams, lr_for: impl Fn(&str) -> f64) -> Self {
        let mut lr = Vec::with_capacity(store.len());
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        for (name, t) in store.iter() {
            lr.push(lr_for(name));
            m.push(vec![0.0; t.numel()]);
            v.push(vec![0.0; t.numel()]);
        }
        AdamW {
            hp,
            lr,
            m,
            v,
            t: 0,
        }
    }

    pub fn uniform(store: &ParamStore, hp: AdamWParams, lr: f64) -> Self {
        Self::new(store, hp, |_| lr)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over every requires_grad parameter. Gradients must have
    /// been populated (a zeroed accumulator counts as a zero gradient).
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.lr.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.lr.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.hp.beta2.powi(self.t as i32);
        for id in 0..self.lr.len() {
            let name = store.name(id).to_string();
            let tensor = store.get_mut(id);
            if !tensor.requires_grad {
                continue;
            }
            let grad = tensor
                .grad
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("parameter {name} has no gradient")))?;
            if grad.len() != tensor.values.len() {
                return Err(Error::Contract(format!(
                    "parameter {name}: gradient length {} vs {} values",
                    grad.len(),
                    tensor.values.len()
                )));
            }
            let lr = self.lr[id];
            let (b1, b2) = (self.hp.beta1, self.hp.beta2);
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            for e in 0..tensor.values.len() {
                let g = tensor.grad.as_ref().unwrap()[e];
                m[e] = b1 * m[e] + (1.0 - b1) * g;
                v[e] = b2 * v[e] + (1.0 - b2) * g * g;
                let m_hat = m[e] / bc1;
                let v_hat = v[e] / bc2;
                let w = tensor.values[e];
                tensor.values[e] =
                    w - lr * m_hat / (v_hat.sqrt() + self.hp.eps) - lr * self.hp.weight_decay * w;
            }
        }
        Ok(())
    }
}
