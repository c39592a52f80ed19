use std::collections::BTreeMap;

use crate::params::{ParamId, ParamStore};
use crate::tape::Gradients;
use crate::Array;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: Array,
    v: Array,
}

/// Adaptive-moment gradient descent with bias correction.
///
/// Only parameters in the optimizer's scope that are trainable in the store
/// are updated. The step counter is shared by all parameters.
pub struct Adam {
    config: AdamConfig,
    scope: Vec<ParamId>,
    state: BTreeMap<ParamId, Moments>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, scope: impl IntoIterator<Item = ParamId>) -> Self {
        Self {
            config,
            scope: scope.into_iter().collect(),
            state: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for &id in &self.scope {
            if !store.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.param(id) else { continue };
            let param = store.get_mut(id);
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Array::zeros(param.raw_dim()),
                v: Array::zeros(param.raw_dim()),
            });
            ndarray::Zip::from(param)
                .and(&mut st.m)
                .and(&mut st.v)
                .and(g)
                .for_each(|p, m, v, &gi| {
                    *m = beta1 * *m + (1.0 - beta1) * gi;
                    *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}
