use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Adam;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// JSON container for a parameter snapshot. Floats are written in
/// shortest round-trip form, so save/load is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    /// Epoch whose parameters are stored; `None` for the initialization.
    pub epoch: Option<usize>,
    pub best_val_avg: Option<f64>,
    pub params: BTreeMap<String, StoredTensor>,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn new(
        store: &ParamStore,
        optimizer: &Adam,
        config_hash: &str,
        seed: u64,
        epoch: Option<usize>,
        best_val_avg: Option<f64>,
    ) -> Self {
        let params = store
            .iter()
            .map(|(k, t)| {
                (
                    k.clone(),
                    StoredTensor {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            epoch,
            best_val_avg,
            params,
            optimizer: optimizer.clone(),
        }
    }

    pub fn store(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        for (k, t) in &self.params {
            s.insert(k.clone(), Tensor::new(t.shape.clone(), t.values.clone())?)?;
        }
        Ok(s)
    }

    /// Overwrites `target` parameter values, requiring identical names and shapes.
    pub fn restore_into(&self, target: &mut ParamStore) -> Result<()> {
        if target.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                target.len()
            )));
        }
        for (k, t) in target.iter_mut() {
            let src = self
                .params
                .get(k)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {k}")))?;
            if src.shape != t.shape() {
                return Err(Error::shape("restore_checkpoint", &src.shape, t.shape()));
            }
            t.data_mut().copy_from_slice(&src.values);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let c: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint version {}",
                c.version
            )));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::OptimConfig;

    #[test]
    fn save_load_is_bit_exact() {
        let mut store = ParamStore::new();
        let vals = vec![0.1 + 0.2, -1e-300, std::f64::consts::PI, 5e-324];
        store
            .insert("a.w", Tensor::new(vec![2, 2], vals).unwrap())
            .unwrap();
        let mut adam = Adam::new(OptimConfig::default());
        let grads = BTreeMap::from([("a.w".to_string(), vec![0.3, -0.7, 1e-9, 2.0])]);
        adam.step(&mut store, &grads, 1e-3).unwrap();
        let c = Checkpoint::new(&store, &adam, "h", 4, Some(2), Some(55.5));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.store().unwrap(), store);

        let mut other = ParamStore::new();
        other.insert("a.w", Tensor::zeros(&[2, 2])).unwrap();
        back.restore_into(&mut other).unwrap();
        assert_eq!(other, store);
        let mut wrong = ParamStore::new();
        wrong.insert("a.w", Tensor::zeros(&[4])).unwrap();
        assert!(back.restore_into(&mut wrong).is_err());
    }
}
