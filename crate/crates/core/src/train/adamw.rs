use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::NamedParam;
use crate::tensor::round_scalar;

use super::schedule::AdamWConfig;

/// AdamW moments keyed by parameter name. State exists only for parameters
/// that were trainable when a step was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter with `requires_grad`; frozen parameters
    /// are not touched and get no state.
    pub fn step(&mut self, params: &[NamedParam], lr: f64) -> Result<()> {
        let trainable: Vec<_> = params.iter().filter(|(_, t)| t.requires_grad()).collect();
        let mut grads = Vec::with_capacity(trainable.len());
        for (name, t) in &trainable {
            let g = t
                .grad()
                .ok_or_else(|| Error::Contract(format!("trainable parameter {name} has no gradient")))?;
            grads.push(g);
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((name, t), g) in trainable.into_iter().zip(grads) {
            let n = t.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut data = t.data_mut();
            for i in 0..n {
                m[i] = round_scalar(beta1 * m[i] + (1.0 - beta1) * g[i]);
                v[i] = round_scalar(beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]);
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let theta = data[i];
                data[i] = round_scalar(theta - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * theta);
            }
        }
        Ok(())
    }
}
