use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tensor};

use super::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    steps: u32,
}

/// Adam with decoupled weight decay.
///
/// Parameters that received no gradient in a step are left completely alone
/// (no decay, no moment update), so parameters routed around by the current
/// batch stay bit-identical. Decay only applies to matrices, not to vectors
/// such as biases, normalization scales or task tokens.
pub struct AdamW {
    pub config: AdamWConfig,
    state: BTreeMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, state: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f32) {
        let c = &self.config;
        for (id, grad) in grads.params() {
            if !store.is_trainable(id) {
                continue;
            }
            let value: &mut Tensor = store.value_mut(id);
            let decay = if value.rows() > 1 { c.weight_decay } else { 0.0 };
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: vec![0.0; grad.data().len()],
                v: vec![0.0; grad.data().len()],
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(st.steps as i32);
            let bc2 = 1.0 - c.beta2.powi(st.steps as i32);
            for (((p, g), m), v) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *p);
            }
        }
    }
}
