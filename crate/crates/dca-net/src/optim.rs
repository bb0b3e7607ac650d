//! Adam optimizer over a parameter store, plus optional global-norm
//! gradient clipping.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::tensor::{Elem, ParamStore};

/// Adam hyperparameters; `(0.9, 0.999, 1e-8)` unless overridden.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.lr <= 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(crate::Error::Config(format!(
                "invalid optimizer settings: lr {} betas ({}, {})",
                self.lr, self.beta1, self.beta2
            )));
        }
        if self.eps <= 0.0 {
            return Err(crate::Error::Config("optimizer eps must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction and no weight decay. Moment buffers follow the
/// store's parameter order, which is fixed at model construction.
#[derive(Debug, Clone)]
pub struct Adam<T: Elem> {
    pub config: AdamConfig,
    /// Update count (bias-correction exponent).
    pub t: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Elem> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let m = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        let v = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
        Adam { config, t: 0, m, v }
    }

    /// One update from the gradients accumulated in `store`; gradients are
    /// left untouched (callers zero them per iteration).
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let one = T::one();
        let corr1 = T::from_f64(1.0 - self.config.beta1.powi(self.t as i32));
        let corr2 = T::from_f64(1.0 - self.config.beta2.powi(self.t as i32));
        let lr = T::from_f64(self.config.lr);
        let eps = T::from_f64(self.config.eps);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).clone();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(m.view_mut())
                .and(v.view_mut())
                .and(grad.view())
                .for_each(|m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                });
            let value = store.value_mut(id);
            ndarray::Zip::from(value.view_mut())
                .and(m.view())
                .and(v.view())
                .for_each(|p, &m, &v| {
                    let mhat = m / corr1;
                    let vhat = v / corr2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<T: Elem>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip threshold must be positive");
    let mut sq = 0.0f64;
    for id in store.ids() {
        for &g in store.grad(id).iter() {
            let gf = g.to_f64();
            sq += gf * gf;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.grad_mut(id).mapv_inplace(|g| g * scale);
        }
    }
    norm
}
