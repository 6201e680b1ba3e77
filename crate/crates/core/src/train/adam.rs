//! Adaptive-moment optimizer over a [`ParamStore`].

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Bias-corrected Adam without weight decay.
///
/// `p ← p − (lr / (1 − β1ᵗ)) · m / (√v / √(1 − β2ᵗ) + ε)`
pub struct Adam {
    config: AdamConfig,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        let zeros = |store: &ParamStore| -> Result<BTreeMap<String, Tensor>> {
            store
                .params()
                .iter()
                .map(|(k, v)| Ok((k.clone(), v.as_tensor().zeros_like()?)))
                .collect()
        };
        Ok(Self { config, t: 0, m: zeros(store)?, v: zeros(store)? })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    /// Restores moments and step count from a checkpoint.
    pub fn restore(&mut self, t: u64, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, slot) in [("first", &m), ("second", &v)] {
            if slot.keys().ne(self.m.keys()) {
                return Err(Error::Checkpoint(format!("{name}-moment names do not match the model parameters")));
            }
        }
        for (k, t0) in &self.m {
            if m[k].shape() != t0.shape() || v[k].shape() != t0.shape() {
                return Err(Error::Checkpoint(format!("moment shape mismatch for `{k}`")));
            }
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Global L2 norm of the gradients of `store`'s parameters.
    pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for var in store.params().values() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update of every parameter in `store`; parameters without a
    /// gradient are treated as having a zero gradient. With `clip_norm`,
    /// gradients are rescaled so their global norm does not exceed it.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, clip_norm: Option<f64>) -> Result<()> {
        let scale = match clip_norm {
            Some(max) => {
                let n = Self::grad_norm(store, grads)?;
                if n > max { max / n } else { 1.0 }
            }
            None => 1.0,
        };
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, var) in store.params() {
            let p = var.as_tensor();
            let g = match grads.get(p) {
                Some(g) if scale != 1.0 => (g * scale)?,
                Some(g) => g.clone(),
                None => p.zeros_like()?,
            };
            let m = ((&self.m[name] * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((&self.v[name] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((v.sqrt()? / bc2.sqrt())? + eps)?;
            let update = ((&m / denom)? * (lr / bc1))?;
            var.set(&(p - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}
