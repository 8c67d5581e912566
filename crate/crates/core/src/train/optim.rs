use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Moment accumulators of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched, decay included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub cfg: OptimConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        for (name, g) in grads {
            let p = store
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if g.len() != p.numel() {
                return Err(Error::shape("adam_step", &[g.len()], p.shape()));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericOverflow { op: "adam_step" });
            }
        }
        self.step += 1;
        let OptimConfig {
            weight_decay,
            beta1,
            beta2,
            eps,
            ..
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let c2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let decay = 1.0 - lr * weight_decay;
        for (name, g) in grads {
            let p = store.get_mut(name).expect("checked above").data_mut();
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for i in 0..g.len() {
                p[i] *= decay;
                mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g[i];
                mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = mo.m[i] / c1;
                let vh = mo.v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
