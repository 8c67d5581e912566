//! The assembled tri-modal classifier.

use std::collections::HashMap;

use rand::Rng;

use crate::encoders::{DualEncoder, EncoderConfig, MetaEncoder};
use crate::error::{Error, Result};
use crate::label_head::{HeadConfig, LabelHead, NUM_CLASSES};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::tmct::{
    assemble_final, DecisionFeatures, FusionConfig, HeadPool, Modality, Tmct, TrimodalFusion,
    FUSION_PREFIX,
};

/// Input tensors for one batch: images `[b, s, s, 3]`, metadata `[b, 20]`.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub cli: &'a Tensor,
    pub der: &'a Tensor,
    pub meta: &'a Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[b, 24]`
    pub logits: Var,
    pub features: DecisionFeatures,
    pub meta0: Option<Var>,
    pub f_final: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Option<DualEncoder>,
    pub meta: Option<MetaEncoder>,
    pub tmct: Tmct,
    pub trimodal: Option<TrimodalFusion>,
    pub pool_cli: Option<HeadPool>,
    pub pool_der: Option<HeadPool>,
    pub head: LabelHead,
    pub decision: Vec<Modality>,
    pub modalities: Vec<Modality>,
}

impl Model {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        enc: &EncoderConfig,
        fusion: &FusionConfig,
        head: &HeadConfig,
    ) -> Result<Self> {
        enc.validate()?;
        fusion.validate(enc)?;
        let (has_cli, has_der, has_meta) = (
            fusion.has(Modality::Cli),
            fusion.has(Modality::Der),
            fusion.has(Modality::Meta),
        );
        let encoder = if has_cli || has_der {
            Some(DualEncoder::new(store, rng, enc)?)
        } else {
            None
        };
        let meta = if has_meta {
            Some(MetaEncoder::new(store, rng, enc)?)
        } else {
            None
        };
        let tmct = Tmct::new(store, rng, enc, fusion)?;
        let trimodal = if fusion.tmct && has_meta && (has_cli || has_der) {
            Some(TrimodalFusion::new(store, rng, fusion, enc.activation)?)
        } else {
            None
        };
        let last = enc.stage_dims[enc.stage_dims.len() - 1];
        let pool_cli = if has_cli {
            Some(HeadPool::new(
                store,
                rng,
                "head.cli",
                last,
                fusion.feature_dim,
            )?)
        } else {
            None
        };
        let pool_der = if has_der {
            Some(HeadPool::new(
                store,
                rng,
                "head.der",
                last,
                fusion.feature_dim,
            )?)
        } else {
            None
        };
        let decision = fusion.effective_decision()?;
        let head = LabelHead::new(store, rng, decision.len() * fusion.feature_dim, head)?;
        let mut modalities = fusion.modalities.clone();
        modalities.sort();
        Ok(Self {
            encoder,
            meta,
            tmct,
            trimodal,
            pool_cli,
            pool_der,
            head,
            decision,
            modalities,
        })
    }

    pub fn f_final_dim(&self) -> usize {
        self.head.projections[0].in_dim
    }

    pub fn forward(&self, ctx: &mut Ctx, input: ModelInput) -> Result<ModelOutput> {
        let b = input.meta.shape().first().copied().unwrap_or(0);
        for (name, t) in [("cli", input.cli), ("der", input.der)] {
            if t.shape().first() != Some(&b) {
                return Err(Error::shape(
                    if name == "cli" {
                        "model_input.cli"
                    } else {
                        "model_input.der"
                    },
                    t.shape(),
                    input.meta.shape(),
                ));
            }
        }
        let has = |m| self.modalities.contains(&m);
        let meta0 = match &self.meta {
            Some(enc) => {
                let m = ctx.tape.constant(input.meta.clone());
                Some(enc.forward(ctx, m)?)
            }
            None => None,
        };
        let (mut cli4, mut der4) = (None, None);
        if let Some(enc) = &self.encoder {
            let cli = if has(Modality::Cli) {
                let x = ctx.tape.constant(input.cli.clone());
                Some(enc.cli.patch_embed(ctx, x)?)
            } else {
                None
            };
            let der = if has(Modality::Der) {
                let x = ctx.tape.constant(input.der.clone());
                Some(enc.der.patch_embed(ctx, x)?)
            } else {
                None
            };
            (cli4, der4) = self.tmct.progressive_fusion(ctx, enc, cli, der, meta0)?;
        }
        let cli = match (&self.pool_cli, cli4) {
            (Some(p), Some(f)) => Some(p.forward(ctx, f)?),
            _ => None,
        };
        let der = match (&self.pool_der, der4) {
            (Some(p), Some(f)) => Some(p.forward(ctx, f)?),
            _ => None,
        };
        let meta = match (&self.trimodal, meta0) {
            (Some(t), Some(m0)) => Some(t.forward(ctx, cli, der, m0)?),
            (None, m0) => m0,
            (Some(_), None) => {
                return Err(Error::Config("trimodal fusion without metadata".into()))
            }
        };
        let features = DecisionFeatures { cli, der, meta };
        let f_final = assemble_final(ctx, &features, &self.decision)?;
        let logits = self.head.forward(ctx, f_final)?;
        Ok(ModelOutput {
            logits,
            features,
            meta0,
            f_final,
        })
    }

    /// Logits without recording a graph, evaluated in chunks of `chunk` rows.
    pub fn predict_logits(
        &self,
        store: &ParamStore,
        input: ModelInput,
        chunk: usize,
    ) -> Result<Tensor> {
        let n = input.meta.shape()[0];
        let chunk = chunk.max(1);
        let mut out = Vec::with_capacity(n * NUM_CLASSES);
        let mut start = 0;
        while start < n {
            let len = chunk.min(n - start);
            let cli = rows(input.cli, start, len)?;
            let der = rows(input.der, start, len)?;
            let meta = rows(input.meta, start, len)?;
            let mut tape = Tape::inference();
            let mut ctx = Ctx::new(&mut tape, store);
            let o = self.forward(
                &mut ctx,
                ModelInput {
                    cli: &cli,
                    der: &der,
                    meta: &meta,
                },
            )?;
            out.extend_from_slice(ctx.tape.data(o.logits));
            start += len;
        }
        Tensor::new(vec![n, NUM_CLASSES], out)
    }
}

/// Fusion parameter scalars in `store`.
pub fn fusion_param_count(store: &ParamStore) -> usize {
    store.count_prefix(FUSION_PREFIX)
}

/// Rows `start..start+len` of a tensor along its first axis.
pub fn rows(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = t.shape();
    if s.is_empty() || start + len > s[0] {
        return Err(Error::invalid(
            "rows",
            format!("rows {start}..{} of {s:?}", start + len),
        ));
    }
    let width: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = len;
    Tensor::new(
        shape,
        t.data()[start * width..(start + len) * width].to_vec(),
    )
}

/// Binds every parameter in `store` as a trainable leaf.
pub fn bind_all(tape: &mut Tape, store: &ParamStore) -> HashMap<String, Var> {
    store
        .iter()
        .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), true)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.random_range(0.0..1.0))
    }

    fn inputs(b: usize, size: usize) -> (Tensor, Tensor, Tensor) {
        let meta = Tensor::from_fn(&[b, 20], |i| if i % 7 == 0 { 1.0 } else { 0.0 });
        (
            random(&[b, size, size, 3], 1),
            random(&[b, size, size, 3], 2),
            meta,
        )
    }

    fn build(fusion: FusionConfig, head: HeadConfig) -> (Model, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::new(
            &mut store,
            &mut rng,
            &EncoderConfig::default(),
            &fusion,
            &head,
        )
        .unwrap();
        (m, store)
    }

    #[test]
    fn default_forward_shapes() {
        let (model, store) = build(FusionConfig::default(), HeadConfig::default());
        let (c, d, m) = inputs(2, 32);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store);
        let out = model
            .forward(
                &mut ctx,
                ModelInput {
                    cli: &c,
                    der: &d,
                    meta: &m,
                },
            )
            .unwrap();
        assert_eq!(ctx.tape.shape(out.f_final), &[2, 256]);
        assert_eq!(ctx.tape.shape(out.logits), &[2, NUM_CLASSES]);
        for f in [out.features.cli, out.features.der, out.features.meta] {
            assert_eq!(ctx.tape.shape(f.unwrap()), &[2, 128]);
        }
        // the head input is exactly [der', meta']
        let f = ctx.tape.data(out.f_final);
        let der = ctx.tape.data(out.features.der.unwrap());
        assert_eq!(&f[..128], &der[..128]);
    }

    #[test]
    fn tmct_off_has_no_fusion_params() {
        let off = FusionConfig {
            tmct: false,
            ..Default::default()
        };
        let (model, store) = build(
            off,
            HeadConfig {
                mha: false,
                ..Default::default()
            },
        );
        assert_eq!(fusion_param_count(&store), 0);
        assert!(model.tmct.stages.is_empty() && model.trimodal.is_none());
        let (_, on) = build(FusionConfig::default(), HeadConfig::default());
        assert!(fusion_param_count(&on) > 0);
        assert_eq!(on.count_prefix("enc."), store.count_prefix("enc."));
    }

    #[test]
    fn tmct_off_meta_feature_is_encoder_output() {
        let off = FusionConfig {
            tmct: false,
            ..Default::default()
        };
        let (model, store) = build(off, HeadConfig::default());
        let (c, d, m) = inputs(1, 32);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &store);
        let out = model
            .forward(
                &mut ctx,
                ModelInput {
                    cli: &c,
                    der: &d,
                    meta: &m,
                },
            )
            .unwrap();
        assert_eq!(out.features.meta, out.meta0);
    }

    #[test]
    fn single_modality_masks() {
        for m in Modality::ALL {
            let cfg = FusionConfig {
                modalities: vec![m],
                ..Default::default()
            };
            let (model, store) = build(cfg, HeadConfig::default());
            assert_eq!(model.decision, vec![m]);
            assert_eq!(fusion_param_count(&store), 0);
            let (c, d, meta) = inputs(2, 32);
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &store);
            let out = model
                .forward(
                    &mut ctx,
                    ModelInput {
                        cli: &c,
                        der: &d,
                        meta: &meta,
                    },
                )
                .unwrap();
            assert_eq!(ctx.tape.shape(out.f_final), &[2, 128]);
        }
    }

    #[test]
    fn der_only_ignores_clinical_input() {
        let cfg = FusionConfig {
            modalities: vec![Modality::Der],
            ..Default::default()
        };
        let (model, store) = build(cfg, HeadConfig::default());
        let (c, d, m) = inputs(2, 32);
        let other = random(&[2, 32, 32, 3], 99);
        let a = model
            .predict_logits(
                &store,
                ModelInput {
                    cli: &c,
                    der: &d,
                    meta: &m,
                },
                8,
            )
            .unwrap();
        let b = model
            .predict_logits(
                &store,
                ModelInput {
                    cli: &other,
                    der: &d,
                    meta: &m,
                },
                8,
            )
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn chunked_prediction_matches_full_batch() {
        let (model, store) = build(FusionConfig::default(), HeadConfig::default());
        let (c, d, m) = inputs(5, 32);
        let input = ModelInput {
            cli: &c,
            der: &d,
            meta: &m,
        };
        let a = model.predict_logits(&store, input, 5).unwrap();
        let b = model.predict_logits(&store, input, 2).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn full_model_gradients_on_two_samples() {
        let (model, store) = build(FusionConfig::default(), HeadConfig::default());
        let (c, d, m) = inputs(2, 32);
        let y = Tensor::from_fn(&[2, NUM_CLASSES], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
        let leaves: Vec<(String, Tensor)> =
            store.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let opts = GradCheckOptions {
            max_coords: Some(3),
            step: 1e-4,
            ..Default::default()
        };
        let report = grad_check(
            |tape, vars| {
                let bound = names.iter().cloned().zip(vars.iter().copied()).collect();
                let mut ctx = Ctx::with_bindings(tape, &store, bound);
                let out = model.forward(
                    &mut ctx,
                    ModelInput {
                        cli: &c,
                        der: &d,
                        meta: &m,
                    },
                )?;
                crate::losses::two_way_loss(ctx.tape, out.logits, &y, 4.0)
            },
            &leaves,
            &opts,
        )
        .unwrap();
        assert!(report.passed(), "max error {}", report.max_error());
    }
}
