//! AdamW with optional global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::{Arr, ParamGrads, ParamId, ParamStore};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2-norm clip applied to the full gradient vector, if set.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

pub struct AdamW {
    pub cfg: AdamConfig,
    m: Vec<Arr>,
    v: Vec<Arr>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store
            .iter()
            .map(|(_, _, v)| ArrayD::zeros(v.raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Self { cfg, m, v, t: 0 }
    }

    /// One update step. Errors out on non-finite gradients so training can
    /// abort with a diagnostic instead of silently corrupting parameters.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        self.step_filtered(store, grads, &mut |_| true)
    }

    /// Update only parameters whose name passes `filter` (used to alternate
    /// generator and discriminator updates over one shared store).
    pub fn step_filtered(
        &mut self,
        store: &mut ParamStore,
        grads: &ParamGrads,
        filter: &mut dyn FnMut(&str) -> bool,
    ) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "grad/store length mismatch");
        self.t += 1;
        let mut scale = 1.0;
        if let Some(max_norm) = self.cfg.clip_norm {
            let mut sq = 0.0;
            for (i, g) in grads.iter().enumerate() {
                if let Some(g) = g {
                    let id = ParamId(i);
                    if store.is_trainable(id) && filter(store.name(id)) {
                        sq += g.iter().map(|x| x * x).sum::<f64>();
                    }
                }
            }
            if !sq.is_finite() {
                return Err(Error::numerical("non-finite gradient norm"));
            }
            let norm = sq.sqrt();
            if norm > max_norm {
                scale = max_norm / norm;
            }
        }
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let id = ParamId(i);
            if !store.is_trainable(id) || !filter(store.name(id)) {
                continue;
            }
            let Some(g) = g else { continue };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite gradient for parameter {}",
                    store.name(id)
                )));
            }
            let (b1, b2, eps, lr, wd) = (
                self.cfg.beta1,
                self.cfg.beta2,
                self.cfg.eps,
                self.cfg.lr,
                self.cfg.weight_decay,
            );
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let theta = store.value_mut(id);
            ndarray::Zip::from(theta)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|th, m, v, &g0| {
                    let g = g0 * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *th -= lr * (mhat / (vhat.sqrt() + eps) + wd * *th);
                });
        }
        Ok(())
    }
}
