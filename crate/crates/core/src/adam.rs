//! Adam optimizer with bias correction, operating on a [`ParamStore`].
//!
//! Moment buffers align with the store's insertion order. Parameters that
//! received no gradient in a step are skipped entirely — values and moments
//! stay bit-identical — so heads that sat out of a forward pass cannot
//! drift.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Optimizer hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            ..AdamParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// First/second moment estimates, one buffer per store entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Fresh zero moments shaped like `store`.
    pub fn new(store: &ParamStore) -> Self {
        let shapes: Vec<usize> = store.iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Checks that the moment buffers still line up with `store`.
    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .iter()
                .enumerate()
                .all(|(i, (_, t))| self.m[i].len() == t.numel() && self.v[i].len() == t.numel())
    }

    /// Applies one Adam update to every parameter that has a gradient in
    /// `grads`. Gradient names must exist in the store and match their
    /// parameter's length. The step counter advances once per call.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        hp: &AdamParams,
    ) -> Result<()> {
        hp.validate()?;
        if !self.matches(store) {
            return Err(Error::Usage(
                "optimizer state does not match the parameter store".into(),
            ));
        }
        let known: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in grads.keys() {
            if !known.iter().any(|k| k == name) {
                return Err(Error::Usage(format!(
                    "gradient for unknown parameter '{name}'"
                )));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - hp.beta1.powf(t);
        let bc2 = 1.0 - hp.beta2.powf(t);
        for (i, (name, tensor)) in store.iter_mut().enumerate() {
            let Some(g) = grads.get(name) else { continue };
            if g.len() != tensor.numel() {
                return Err(Error::Shape(format!(
                    "gradient for '{name}' has {} entries, parameter has {}",
                    g.len(),
                    tensor.numel()
                )));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = tensor.data_mut();
            for e in 0..g.len() {
                m[e] = hp.beta1 * m[e] + (1.0 - hp.beta1) * g[e];
                v[e] = hp.beta2 * v[e] + (1.0 - hp.beta2) * g[e] * g[e];
                let m_hat = m[e] / bc1;
                let v_hat = v[e] / bc2;
                data[e] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }
}
