use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter.
///
/// `steps` counts the updates this parameter has received and drives its
/// bias correction, so a parameter that sat frozen starts from a fresh
/// correction when it is first updated.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Optimiser steps taken.
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of every parameter named in `names`.
    ///
    /// Parameters not listed keep both their values and their moments.
    pub fn step<'a>(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        names: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for name in names {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("missing gradient for `{name}`")))?;
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("`{name}`: gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
            let mom = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
                steps: 0,
            });
            mom.steps += 1;
            let bc1 = 1.0 - beta1.powi(mom.steps as i32);
            let bc2 = 1.0 - beta2.powi(mom.steps as i32);
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.t += 1;
        Ok(())
    }
}
