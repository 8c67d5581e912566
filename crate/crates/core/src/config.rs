//! Run configuration: TOML on disk, canonical form, content hash and
//! dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentConfig, GeneratorConfig};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::label_head::HeadConfig;
use crate::losses::LossConfig;
use crate::tmct::FusionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    /// Decoupled: parameters shrink by `lr * weight_decay` each step.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Rows per forward pass during evaluation.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            schedule: Schedule::Cosine,
            eval_chunk: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Total synthetic samples; the split sizes live in `generator.sizes`.
    pub samples: usize,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples: 1011,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

fn ser_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(ser_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Canonical serialization: every field present, fixed order.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(ser_err)
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate(&self.encoder)?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.data.generator.validate()?;
        let o = &self.optim;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!(
                "optim.lr must be positive, got {}",
                o.lr
            )));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "optim.weight_decay must be non-negative, got {}",
                o.weight_decay
            )));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2))
            || o.eps.is_nan()
            || o.eps <= 0.0
        {
            return Err(Error::Config(
                "optim betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if self.train.batch_size == 0 || self.train.eval_chunk == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.head.heads == 0 || !self.head.dim.is_multiple_of(self.head.heads) {
            return Err(Error::Config(format!(
                "head dim {} not divisible by {} heads",
                self.head.dim, self.head.heads
            )));
        }
        Ok(())
    }

    /// Applies `key.path=value` overrides in order. The key must already
    /// exist; the value is parsed as a TOML literal, falling back to a bare
    /// string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(ser_err)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut root, key.trim(), parse_literal(raw.trim()))?;
        }
        root.try_into()
            .map_err(|e| Error::Config(format!("after overrides: {e}")))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key {key}"));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for p in &parts[..parts.len() - 1] {
        node = node
            .get_mut(*p)
            .filter(|v| v.is_table())
            .ok_or_else(unknown)?;
    }
    let slot = node.get_mut(parts[parts.len() - 1]).ok_or_else(unknown)?;
    *slot = match (&*slot, value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossKind;
    use crate::tmct::Modality;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.optim.lr, 1e-4);
        assert_eq!(c.optim.weight_decay, 1e-4);
        assert_eq!((c.train.epochs, c.train.batch_size), (200, 32));
        assert_eq!(c.train.schedule, Schedule::Cosine);
        assert_eq!(c.loss.temperature, 4.0);
        assert_eq!(c.data.generator.sizes.total(), c.data.samples);
        c.validate().unwrap();
    }

    #[test]
    fn canonical_round_trip() {
        let c = RunConfig::default()
            .with_overrides(&["seed=9", "fusion.modalities=[\"der\", \"meta\"]"])
            .unwrap();
        let text = c.to_toml().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        assert_ne!(c.hash().unwrap(), RunConfig::default().hash().unwrap());
        assert_eq!(c.fusion.modalities, vec![Modality::Der, Modality::Meta]);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = RunConfig::from_toml_str("seed = 3\n[loss]\nkind = \"bce\"\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.loss.kind, LossKind::Bce);
        assert_eq!(c.encoder, EncoderConfig::default());
        assert!(RunConfig::from_toml_str("[loss]\nkinds = 1\n").is_err());
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&[
                "optim.lr=1",
                "fusion.tmct=false",
                "loss.kind=bce",
                "train.epochs = 5",
            ])
            .unwrap();
        assert_eq!(c.optim.lr, 1.0);
        assert!(!c.fusion.tmct);
        assert_eq!(c.loss.kind, LossKind::Bce);
        assert_eq!(c.train.epochs, 5);
        for bad in [
            "optim.lrr=1",
            "nope.x=1",
            "seed",
            "seed.x=1",
            "train.epochs=abc",
        ] {
            assert!(
                matches!(
                    RunConfig::default().with_overrides(&[bad]),
                    Err(Error::Config(_))
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn validation_rejects_bad_values() {
        for o in [
            "optim.lr=0",
            "train.batch_size=0",
            "loss.temperature=-1",
            "optim.beta1=1",
        ] {
            let c = RunConfig::default().with_overrides(&[o]).unwrap();
            assert!(c.validate().is_err(), "{o}");
        }
    }
}
