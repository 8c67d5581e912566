//! Registered finite-difference checks: every trainable block in isolation
//! (inputs and parameters as leaves) and the assembled model end to end.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::encoders::{EncoderConfig, PatchMerge, StageFeature, WindowBlock};
use crate::error::{Error, Result};
use crate::label_head::{HeadConfig, LabelHead, NUM_CLASSES, NUM_TASKS, TASKS};
use crate::losses::{bce_loss, labels_to_multihot, two_way_loss};
use crate::model::{Model, ModelInput};
use crate::nn::{Activation, Ctx, Linear, MultiHeadAttention, ParamStore};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use crate::tmct::{
    ca_image_to_image, ca_meta_to_image, meta_tokens, FusionConfig, TmctStage, TrimodalFusion,
};

pub const BLOCKS: [&str; 10] = [
    "window_attention",
    "patch_merge",
    "ca_der_to_cli",
    "ca_meta_to_cli",
    "tmct_block",
    "trimodal_meta_fusion",
    "label_head_mha",
    "twl",
    "bce",
    "full_model",
];

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub block: String,
    pub report: GradCheckReport,
    pub seconds: f64,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weighted sum with fixed random weights, so no output direction is
/// privileged.
fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(random(tape.shape(y), seed));
    let y = tape.mul(y, w)?;
    tape.sum(y)
}

/// Checks `body(ctx, inputs)` with both the inputs and every parameter of
/// `store` as leaves.
fn check_module<F>(
    store: &ParamStore,
    inputs: Vec<(String, Tensor)>,
    opts: &GradCheckOptions,
    body: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx, &[Var]) -> Result<Var>,
{
    let k = inputs.len();
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    let mut leaves = inputs;
    leaves.extend(store.iter().map(|(n, t)| (n.clone(), t.clone())));
    grad_check(
        |tape, vars| {
            let bound: HashMap<String, Var> = names
                .iter()
                .cloned()
                .zip(vars[k..].iter().copied())
                .collect();
            let mut ctx = Ctx::with_bindings(tape, store, bound);
            body(&mut ctx, &vars[..k])
        },
        &leaves,
        opts,
    )
}

fn multihot_targets(n: usize, seed: u64) -> Result<Tensor> {
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(n * NUM_CLASSES);
    for _ in 0..n {
        let mut labels = [0; NUM_TASKS];
        for (l, t) in labels.iter_mut().zip(TASKS.iter()) {
            *l = r.random_range(0..t.cardinality());
        }
        data.extend(labels_to_multihot(&labels)?);
    }
    Tensor::new(vec![n, NUM_CLASSES], data)
}

/// Options for the isolated blocks. Attention key biases have exactly zero
/// derivative (softmax is shift invariant); at a step of 1e-5 their
/// central differences are pure rounding noise near 1e-10, so 1e-4 is used.
pub fn block_options() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-4,
        ..Default::default()
    }
}

/// Block options restricted to a few sampled coordinates per parameter tensor.
pub fn model_options() -> GradCheckOptions {
    GradCheckOptions {
        max_coords: Some(3),
        ..block_options()
    }
}

pub fn check_block(name: &str, cfg: &RunConfig) -> Result<GradCheckReport> {
    let opts = block_options();
    let act = Activation::Gelu;
    match name {
        "window_attention" => {
            let mut store = ParamStore::new();
            let plain = WindowBlock::new(&mut store, &mut rng(1), "w0", 8, 2, 2, 0, act)?;
            let shifted = WindowBlock::new(&mut store, &mut rng(2), "w1", 8, 2, 2, 1, act)?;
            check_module(
                &store,
                vec![("x".into(), random(&[2, 16, 8], 3))],
                &opts,
                |ctx, v| {
                    let h = plain.forward(ctx, v[0], 4, 2)?;
                    let h = shifted.forward(ctx, h, 4, 2)?;
                    probe(ctx.tape, h, 4)
                },
            )
        }
        "patch_merge" => {
            let mut store = ParamStore::new();
            let merge = PatchMerge::new(&mut store, &mut rng(5), "m", 8)?;
            check_module(
                &store,
                vec![("x".into(), random(&[2, 16, 8], 6))],
                &opts,
                |ctx, v| {
                    let f = merge.forward(
                        ctx,
                        StageFeature {
                            tokens: v[0],
                            stage: 0,
                            side: 4,
                        },
                    )?;
                    probe(ctx.tape, f.tokens, 7)
                },
            )
        }
        "ca_der_to_cli" => {
            let mut store = ParamStore::new();
            let attn = MultiHeadAttention::new(&mut store, &mut rng(8), "ca", 8, 2)?;
            let inputs = vec![
                ("cli".into(), random(&[2, 16, 8], 9)),
                ("der".into(), random(&[2, 16, 8], 10)),
            ];
            check_module(&store, inputs, &opts, |ctx, v| {
                let y = ca_image_to_image(ctx, &attn, v[0], v[1], 4, 2)?;
                probe(ctx.tape, y, 11)
            })
        }
        "ca_meta_to_cli" => {
            let mut store = ParamStore::new();
            let attn = MultiHeadAttention::new(&mut store, &mut rng(12), "ca", 8, 2)?;
            let proj = Linear::new(&mut store, &mut rng(13), "proj", 4, 8, false)?;
            let inputs = vec![
                ("cli".into(), random(&[2, 16, 8], 14)),
                ("meta".into(), random(&[2, 16], 15)),
            ];
            check_module(&store, inputs, &opts, |ctx, v| {
                let m = meta_tokens(ctx, &proj, v[1], 4)?;
                let y = ca_meta_to_image(ctx, &attn, v[0], m)?;
                probe(ctx.tape, y, 16)
            })
        }
        "tmct_block" => {
            let enc = EncoderConfig {
                stage_dims: vec![8, 16, 32, 64],
                meta_hidden: vec![16],
                ..Default::default()
            };
            let fusion = FusionConfig {
                feature_dim: 16,
                mlp_hidden: 16,
                ..Default::default()
            };
            let mut store = ParamStore::new();
            let stage = TmctStage::new(&mut store, &mut rng(17), 1, &enc, &fusion)?;
            let inputs = vec![
                ("cli".into(), random(&[2, 16, 16], 18)),
                ("der".into(), random(&[2, 16, 16], 19)),
                ("meta".into(), random(&[2, 16], 20)),
            ];
            check_module(&store, inputs, &opts, |ctx, v| {
                let fc = StageFeature {
                    tokens: v[0],
                    stage: 1,
                    side: 4,
                };
                let fd = StageFeature {
                    tokens: v[1],
                    stage: 1,
                    side: 4,
                };
                let out = stage.forward(ctx, Some(fc), Some(fd), Some(v[2]))?;
                let missing = || Error::Config("fused stream missing".into());
                let a = probe(ctx.tape, out.f_cli_next.ok_or_else(missing)?.tokens, 21)?;
                let b = probe(ctx.tape, out.f_der_next.ok_or_else(missing)?.tokens, 22)?;
                ctx.tape.add(a, b)
            })
        }
        "trimodal_meta_fusion" => {
            let fusion = FusionConfig {
                feature_dim: 8,
                mlp_hidden: 8,
                heads: 2,
                ..Default::default()
            };
            let mut store = ParamStore::new();
            let block = TrimodalFusion::new(&mut store, &mut rng(23), &fusion, act)?;
            let inputs = vec![
                ("cli".into(), random(&[2, 8], 24)),
                ("der".into(), random(&[2, 8], 25)),
                ("meta".into(), random(&[2, 8], 26)),
            ];
            check_module(&store, inputs, &opts, |ctx, v| {
                let y = block.forward(ctx, Some(v[0]), Some(v[1]), v[2])?;
                probe(ctx.tape, y, 27)
            })
        }
        "label_head_mha" => {
            let mut store = ParamStore::new();
            let head = LabelHead::new(
                &mut store,
                &mut rng(28),
                16,
                &HeadConfig {
                    mha: true,
                    heads: 2,
                    dim: 8,
                },
            )?;
            check_module(
                &store,
                vec![("f_final".into(), random(&[2, 16], 29))],
                &opts,
                |ctx, v| {
                    let y = head.forward(ctx, v[0])?;
                    probe(ctx.tape, y, 30)
                },
            )
        }
        "twl" | "bce" => {
            let y = multihot_targets(4, 31)?;
            let logits = random(&[4, NUM_CLASSES], 32)
                .into_data()
                .into_iter()
                .map(|v| 3.0 * v)
                .collect();
            let logits = Tensor::new(vec![4, NUM_CLASSES], logits)?;
            let t = cfg.loss.temperature;
            let twl = name == "twl";
            grad_check(
                |tape, v| {
                    if twl {
                        two_way_loss(tape, v[0], &y, t)
                    } else {
                        bce_loss(tape, v[0], &y)
                    }
                },
                &[("logits".into(), logits)],
                &opts,
            )
        }
        "full_model" => check_full_model(cfg, &model_options()),
        other => Err(Error::Config(format!(
            "unknown block {other}; known: {}",
            BLOCKS.join(", ")
        ))),
    }
}

/// Model from `cfg`, two random samples, configured loss, all parameters
/// as leaves.
pub fn check_full_model(cfg: &RunConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let model = Model::new(
        &mut store,
        &mut rng(cfg.seed),
        &cfg.encoder,
        &cfg.fusion,
        &cfg.head,
    )?;
    let s = cfg.encoder.image_size;
    let cli = random(&[2, s, s, 3], 40);
    let der = random(&[2, s, s, 3], 41);
    let meta = Tensor::from_fn(&[2, 20], |i| if i % 7 == 0 { 1.0 } else { 0.0 });
    let y = multihot_targets(2, 42)?;
    check_module(&store, Vec::new(), opts, |ctx, _| {
        let out = model.forward(
            ctx,
            ModelInput {
                cli: &cli,
                der: &der,
                meta: &meta,
            },
        )?;
        crate::losses::loss(ctx.tape, &cfg.loss, out.logits, &y)
    })
}

/// Runs every registered check in order.
pub fn check_all(
    cfg: &RunConfig,
    mut on_block: impl FnMut(&BlockReport),
) -> Result<Vec<BlockReport>> {
    BLOCKS
        .iter()
        .map(|&b| {
            let t = std::time::Instant::now();
            let report = check_block(b, cfg)?;
            let r = BlockReport {
                block: b.to_string(),
                report,
                seconds: t.elapsed().as_secs_f64(),
            };
            on_block(&r);
            Ok(r)
        })
        .collect()
}
