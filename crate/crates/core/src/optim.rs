//! Adam with inspectable state.
//!
//! candle-nn's optimizers keep their moments private; checkpoints need them
//! to resume bit-exactly, so the update is written out here.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct Adam {
    params: AdamParams,
    slots: Vec<Slot>,
    step: u64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, params: AdamParams) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let m = var.zeros_like()?;
                let v = var.zeros_like()?;
                Ok(Slot { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            slots,
            step: 0,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.params.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.apply(&grads)
    }

    /// One Adam update for every variable that has a gradient in `grads`.
    pub fn apply(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamParams {
            lr,
            beta1,
            beta2,
            eps,
        } = self.params;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for slot in self.slots.iter_mut() {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            // Moments and updates carry no graph; otherwise every step's
            // graph stays reachable from the optimizer.
            let g = g.detach();
            let m = ((&slot.m * beta1)? + (&g * (1.0 - beta1))?)?.detach();
            let v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?.detach();
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let delta = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (slot.var.as_tensor().detach() - (delta * lr)?)?;
            slot.var.set(&next)?;
            slot.m = m;
            slot.v = v;
        }
        Ok(())
    }

    /// Moments keyed `"m/<name>"` and `"v/<name>"`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for s in &self.slots {
            out.insert(format!("m/{}", s.name), s.m.clone());
            out.insert(format!("v/{}", s.name), s.v.clone());
        }
        out
    }

    pub fn state(&self) -> AdamState {
        AdamState {
            params: self.params,
            step: self.step,
        }
    }

    pub fn restore(&mut self, state: &AdamState, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        self.params = state.params;
        self.step = state.step;
        for s in self.slots.iter_mut() {
            let fetch = |key: String| {
                tensors
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))
            };
            s.m = fetch(format!("m/{}", s.name))?;
            s.v = fetch(format!("v/{}", s.name))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub params: AdamParams,
    pub step: u64,
}

/// Cosine decay from `base` to `base · floor` over `total` steps.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total <= 1 || floor >= 1.0 {
        return base;
    }
    let p = (step as f64 / (total - 1) as f64).min(1.0);
    let w = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    base * (floor + (1.0 - floor) * w)
}
