//! Adam optimizer with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use crate::autodiff::store::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second moment estimates plus a strictly increasing
/// step counter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    slots: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the parameters named in `trainable`. Every trainable
    /// name must have a gradient entry; a missing one signals that the
    /// parameter never reached the loss (detached subgraph).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        trainable: &[String],
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);

        for name in trainable {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::DetachedParam { name: name.clone() })?;
            let data = store.get_mut(name)?;
            if grad.len() != data.values.len() {
                return Err(Error::shape(
                    "adam",
                    format!("gradient len {} vs param {} len {}", grad.len(), name, data.values.len()),
                ));
            }
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            for i in 0..grad.len() {
                let g = grad[i];
                slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g;
                slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data.values[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}
