//! Tri-modal cross-attention fusion between the two image streams and the
//! metadata feature, the pooled decision heads and the final feature.
//!
//! Every fusion parameter lives under the `tmct.` prefix, so a model built
//! with fusion disabled owns none of them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    merge_windows, partition_windows, DualEncoder, EncoderConfig, StageFeature, NUM_STAGES,
};
use crate::error::{Error, Result};
use crate::nn::{Activation, Ctx, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::tensor::Var;

pub const FUSION_PREFIX: &str = "tmct.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Cli,
    Der,
    Meta,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Cli, Modality::Der, Modality::Meta];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Cli => "cli",
            Modality::Der => "der",
            Modality::Meta => "meta",
        }
    }
}

/// Keys and values of the metadata cross-attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaKv {
    #[default]
    MetaOnly,
    /// Metadata tokens followed by the tokens of both image streams.
    ConcatImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub tmct: bool,
    pub meta_tokens: usize,
    pub meta_kv: MetaKv,
    pub mlp_hidden: usize,
    pub feature_dim: usize,
    pub heads: usize,
    pub decision: Vec<Modality>,
    pub modalities: Vec<Modality>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            tmct: true,
            meta_tokens: 4,
            meta_kv: MetaKv::MetaOnly,
            mlp_hidden: 128,
            feature_dim: 128,
            heads: 4,
            decision: vec![Modality::Der, Modality::Meta],
            modalities: Modality::ALL.to_vec(),
        }
    }
}

fn normalized(set: &[Modality], what: &str) -> Result<Vec<Modality>> {
    let mut v = set.to_vec();
    v.sort();
    v.dedup();
    if v.is_empty() {
        return Err(Error::Config(format!(
            "{what} must name at least one modality"
        )));
    }
    if v.len() != set.len() {
        return Err(Error::Config(format!(
            "{what} lists a modality twice: {set:?}"
        )));
    }
    Ok(v)
}

impl FusionConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        normalized(&self.decision, "decision")?;
        normalized(&self.modalities, "modalities")?;
        if self.meta_tokens == 0 || !self.feature_dim.is_multiple_of(self.meta_tokens) {
            return Err(Error::Config(format!(
                "meta feature width {} not divisible into {} tokens",
                self.feature_dim, self.meta_tokens
            )));
        }
        if enc.meta_feature_dim() != self.feature_dim {
            return Err(Error::Config(format!(
                "metadata encoder width {} differs from feature_dim {}",
                enc.meta_feature_dim(),
                self.feature_dim
            )));
        }
        if self.heads == 0 || !self.feature_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} fusion heads do not divide {}",
                self.heads, self.feature_dim
            )));
        }
        Ok(())
    }

    pub fn has(&self, m: Modality) -> bool {
        self.modalities.contains(&m)
    }

    /// Decision features actually assembled: the configured selection under
    /// the full mask, otherwise every available modality.
    pub fn effective_decision(&self) -> Result<Vec<Modality>> {
        let mask = normalized(&self.modalities, "modalities")?;
        if mask.len() == Modality::ALL.len() {
            normalized(&self.decision, "decision")
        } else {
            Ok(mask)
        }
    }
}

/// Windowed cross-attention: queries from one stream, keys and values from
/// the same window of both streams.
pub fn ca_image_to_image(
    ctx: &mut Ctx,
    attn: &MultiHeadAttention,
    query: Var,
    other: Var,
    side: usize,
    window: usize,
) -> Result<Var> {
    let (sq, so) = (
        ctx.tape.shape(query).to_vec(),
        ctx.tape.shape(other).to_vec(),
    );
    if sq != so {
        return Err(Error::shape("ca_image_to_image", &sq, &so));
    }
    let q = partition_windows(ctx.tape, query, side, window)?;
    let o = partition_windows(ctx.tape, other, side, window)?;
    let kv = ctx.tape.concat(&[q, o], 1)?;
    let out = attn.forward(ctx, q, kv)?;
    merge_windows(ctx.tape, out, side, window)
}

/// Splits `meta: [b, d]` into `m` contiguous chunks and maps each to width
/// `proj.out_dim`, giving `[b, m, c]`.
pub fn meta_tokens(ctx: &mut Ctx, proj: &Linear, meta: Var, m: usize) -> Result<Var> {
    let s = ctx.tape.shape(meta).to_vec();
    if s.len() != 2 || m == 0 || !s[1].is_multiple_of(m) || s[1] / m != proj.in_dim {
        return Err(Error::Config(format!(
            "meta feature {s:?} cannot form {m} tokens of width {}",
            proj.in_dim
        )));
    }
    let x = ctx.tape.reshape(meta, &[s[0], m, s[1] / m])?;
    proj.forward(ctx, x)
}

/// Global cross-attention from image tokens to the given key/value tokens.
pub fn ca_meta_to_image(
    ctx: &mut Ctx,
    attn: &MultiHeadAttention,
    image: Var,
    kv: Var,
) -> Result<Var> {
    attn.forward(ctx, image, kv)
}

/// Fusion into one stream: `s = f + CA_img + CA_meta`, `out = MLP(LN(s)) + s`.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub norm_self: LayerNorm,
    pub norm_other: Option<LayerNorm>,
    pub img_attn: Option<MultiHeadAttention>,
    pub meta_attn: Option<MultiHeadAttention>,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl CrossBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        with_image: bool,
        with_meta: bool,
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            norm_self: LayerNorm::new(store, &format!("{name}.norm_self"), dim)?,
            norm_other: if with_image {
                Some(LayerNorm::new(store, &format!("{name}.norm_other"), dim)?)
            } else {
                None
            },
            img_attn: if with_image {
                Some(MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{name}.ca_img"),
                    dim,
                    heads,
                )?)
            } else {
                None
            },
            meta_attn: if with_meta {
                Some(MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{name}.ca_meta"),
                    dim,
                    heads,
                )?)
            } else {
                None
            },
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), dim)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), (dim, hidden, dim), act)?,
        })
    }

    /// `meta_tok` must already be projected to the stage width.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        f: Var,
        other: Option<Var>,
        meta_tok: Option<Var>,
        meta_kv: MetaKv,
        side: usize,
        window: usize,
    ) -> Result<Var> {
        let a = self.norm_self.forward(ctx, f)?;
        let b = match (&self.norm_other, other) {
            (Some(n), Some(o)) => Some(n.forward(ctx, o)?),
            (None, None) => None,
            _ => {
                return Err(Error::Config(
                    "image stream availability differs from block layout".into(),
                ))
            }
        };
        let mut s = f;
        if let (Some(attn), Some(b)) = (&self.img_attn, b) {
            let ca = ca_image_to_image(ctx, attn, a, b, side, window)?;
            s = ctx.tape.add(s, ca)?;
        }
        match (&self.meta_attn, meta_tok) {
            (Some(attn), Some(m)) => {
                let kv = match (meta_kv, b) {
                    (MetaKv::ConcatImage, Some(b)) => ctx.tape.concat(&[m, a, b], 1)?,
                    (MetaKv::ConcatImage, None) => ctx.tape.concat(&[m, a], 1)?,
                    (MetaKv::MetaOnly, _) => m,
                };
                let ca = ca_meta_to_image(ctx, attn, a, kv)?;
                s = ctx.tape.add(s, ca)?;
            }
            (None, None) => {}
            _ => {
                return Err(Error::Config(
                    "metadata availability differs from block layout".into(),
                ))
            }
        }
        let h = self.norm_mlp.forward(ctx, s)?;
        let h = self.mlp.forward(ctx, h)?;
        ctx.tape.add(h, s)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusedStageOutput {
    pub f_cli_next: Option<StageFeature>,
    pub f_der_next: Option<StageFeature>,
    pub f_meta_pass: Option<Var>,
}

/// The fusion blocks of one stage.
#[derive(Clone, Debug)]
pub struct TmctStage {
    pub stage: usize,
    pub meta_proj: Option<Linear>,
    pub cli: Option<CrossBlock>,
    pub der: Option<CrossBlock>,
    pub meta_tokens: usize,
    pub meta_kv: MetaKv,
    pub window: usize,
}

impl TmctStage {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        stage: usize,
        enc: &EncoderConfig,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        let dim = enc.stage_dims[stage];
        let heads = enc.heads_per_stage[stage];
        let (has_cli, has_der, has_meta) = (
            cfg.has(Modality::Cli),
            cfg.has(Modality::Der),
            cfg.has(Modality::Meta),
        );
        let both = has_cli && has_der;
        let name = format!("tmct.stage{stage}");
        let meta_proj = if has_meta && (has_cli || has_der) {
            Some(Linear::new(
                store,
                rng,
                &format!("{name}.meta_proj"),
                cfg.feature_dim / cfg.meta_tokens,
                dim,
                false,
            )?)
        } else {
            None
        };
        let mut block = |stream: &str, present: bool| -> Result<Option<CrossBlock>> {
            if !present || !(both || has_meta) {
                return Ok(None);
            }
            let b = CrossBlock::new(
                store,
                rng,
                &format!("{name}.{stream}"),
                dim,
                heads,
                enc.mlp_ratio * dim,
                both,
                has_meta,
                enc.activation,
            )?;
            Ok(Some(b))
        };
        let cli = block("cli", has_cli)?;
        let der = block("der", has_der)?;
        Ok(Self {
            stage,
            meta_proj,
            cli,
            der,
            meta_tokens: cfg.meta_tokens,
            meta_kv: cfg.meta_kv,
            window: enc.window_at(stage),
        })
    }

    /// Fuses both streams with each other and with the metadata feature.
    /// The metadata feature is returned untouched.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        f_cli: Option<StageFeature>,
        f_der: Option<StageFeature>,
        f_meta: Option<Var>,
    ) -> Result<FusedStageOutput> {
        if let (Some(c), Some(d)) = (f_cli, f_der) {
            let (sc, sd) = (
                ctx.tape.shape(c.tokens).to_vec(),
                ctx.tape.shape(d.tokens).to_vec(),
            );
            if sc != sd {
                return Err(Error::shape("tmct_block", &sc, &sd));
            }
        }
        let side = f_cli.or(f_der).map(|f| f.side).unwrap_or(1);
        let meta_tok = match (&self.meta_proj, f_meta) {
            (Some(p), Some(m)) => Some(meta_tokens(ctx, p, m, self.meta_tokens)?),
            _ => None,
        };
        let run = |ctx: &mut Ctx,
                   block: &Option<CrossBlock>,
                   f: Option<StageFeature>,
                   other: Option<StageFeature>|
         -> Result<Option<StageFeature>> {
            match (block, f) {
                (Some(b), Some(f)) => {
                    let t = b.forward(
                        ctx,
                        f.tokens,
                        other.map(|o| o.tokens),
                        meta_tok,
                        self.meta_kv,
                        side,
                        self.window,
                    )?;
                    Ok(Some(StageFeature { tokens: t, ..f }))
                }
                (None, f) => Ok(f),
                (Some(_), None) => Err(Error::Config("fusion block without its stream".into())),
            }
        };
        let f_cli_next = run(ctx, &self.cli, f_cli, f_der)?;
        let f_der_next = run(ctx, &self.der, f_der, f_cli)?;
        Ok(FusedStageOutput {
            f_cli_next,
            f_der_next,
            f_meta_pass: f_meta,
        })
    }
}

/// Attention of the metadata feature over `[cli', der', meta0]` followed by a
/// residual MLP.
#[derive(Clone, Debug)]
pub struct TrimodalFusion {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
    pub dim: usize,
}

impl TrimodalFusion {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &FusionConfig,
        act: Activation,
    ) -> Result<Self> {
        let d = cfg.feature_dim;
        Ok(Self {
            norm_q: LayerNorm::new(store, "tmct.trimodal.norm_q", d)?,
            norm_kv: LayerNorm::new(store, "tmct.trimodal.norm_kv", d)?,
            attn: MultiHeadAttention::new(store, rng, "tmct.trimodal.attn", d, cfg.heads)?,
            norm_mlp: LayerNorm::new(store, "tmct.trimodal.norm_mlp", d)?,
            mlp: Mlp::new(store, rng, "tmct.trimodal.mlp", (d, cfg.mlp_hidden, d), act)?,
            dim: d,
        })
    }

    /// All inputs `[b, dim]`; missing image features are left out of the keys.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        cli: Option<Var>,
        der: Option<Var>,
        meta0: Var,
    ) -> Result<Var> {
        let sm = ctx.tape.shape(meta0).to_vec();
        if sm.len() != 2 || sm[1] != self.dim {
            return Err(Error::shape("trimodal_meta_fusion", &sm, &[0, self.dim]));
        }
        let b = sm[0];
        let mut keys = Vec::with_capacity(3);
        for v in [cli, der, Some(meta0)].into_iter().flatten() {
            let s = ctx.tape.shape(v).to_vec();
            if s != sm {
                return Err(Error::shape("trimodal_meta_fusion", &s, &sm));
            }
            keys.push(ctx.tape.reshape(v, &[b, 1, self.dim])?);
        }
        let kv = ctx.tape.concat(&keys, 1)?;
        let kv = self.norm_kv.forward(ctx, kv)?;
        let q = ctx.tape.reshape(meta0, &[b, 1, self.dim])?;
        let q = self.norm_q.forward(ctx, q)?;
        let att = self.attn.forward(ctx, q, kv)?;
        let att = ctx.tape.reshape(att, &[b, self.dim])?;
        let u = ctx.tape.add(att, meta0)?;
        let h = self.norm_mlp.forward(ctx, u)?;
        let h = self.mlp.forward(ctx, h)?;
        ctx.tape.add(h, u)
    }
}

/// Global mean over tokens followed by a linear map.
#[derive(Clone, Debug)]
pub struct HeadPool {
    pub fc: Linear,
}

impl HeadPool {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(store, rng, name, in_dim, out_dim, true)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, f: StageFeature) -> Result<Var> {
        let pooled = ctx.tape.mean_axis(f.tokens, 1)?;
        self.fc.forward(ctx, pooled)
    }
}

/// Pooled per-modality decision vectors, each `[b, 128]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct DecisionFeatures {
    pub cli: Option<Var>,
    pub der: Option<Var>,
    pub meta: Option<Var>,
}

impl DecisionFeatures {
    pub fn get(&self, m: Modality) -> Option<Var> {
        match m {
            Modality::Cli => self.cli,
            Modality::Der => self.der,
            Modality::Meta => self.meta,
        }
    }
}

/// Concatenates the selected features in the fixed order cli, der, meta.
pub fn assemble_final(
    ctx: &mut Ctx,
    features: &DecisionFeatures,
    selection: &[Modality],
) -> Result<Var> {
    let sel = normalized(selection, "decision")?;
    let parts = sel
        .iter()
        .map(|&m| {
            features.get(m).ok_or_else(|| {
                Error::Config(format!("decision feature {} is not available", m.name()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    ctx.tape.concat(&parts, 1)
}

/// Per-stage fusion blocks; empty when fusion is disabled.
#[derive(Clone, Debug)]
pub struct Tmct {
    pub stages: Vec<TmctStage>,
}

impl Tmct {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        enc: &EncoderConfig,
        cfg: &FusionConfig,
    ) -> Result<Self> {
        let stages = if cfg.tmct {
            (0..NUM_STAGES)
                .map(|s| TmctStage::new(store, rng, s, enc, cfg))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self { stages })
    }

    /// Runs the four encoder stages with fusion after each one. The next
    /// stage input is the encoder output plus the fused output; without
    /// fusion it is the encoder output alone.
    pub fn progressive_fusion(
        &self,
        ctx: &mut Ctx,
        enc: &DualEncoder,
        mut cli: Option<StageFeature>,
        mut der: Option<StageFeature>,
        meta0: Option<Var>,
    ) -> Result<(Option<StageFeature>, Option<StageFeature>)> {
        for s in 0..NUM_STAGES {
            cli = cli.map(|f| enc.cli.run_stage(ctx, f)).transpose()?;
            der = der.map(|f| enc.der.run_stage(ctx, f)).transpose()?;
            if let Some(stage) = self.stages.get(s) {
                let fused = stage.forward(ctx, cli, der, meta0)?;
                cli = combine(ctx, cli, fused.f_cli_next)?;
                der = combine(ctx, der, fused.f_der_next)?;
            }
            if s + 1 < NUM_STAGES {
                cli = cli.map(|f| enc.cli.merge(ctx, f)).transpose()?;
                der = der.map(|f| enc.der.merge(ctx, f)).transpose()?;
            }
        }
        Ok((cli, der))
    }
}

fn combine(
    ctx: &mut Ctx,
    enc_out: Option<StageFeature>,
    fused: Option<StageFeature>,
) -> Result<Option<StageFeature>> {
    match (enc_out, fused) {
        (Some(e), Some(f)) if e.tokens != f.tokens => {
            let t = ctx.tape.add(e.tokens, f.tokens)?;
            Ok(Some(StageFeature { tokens: t, ..e }))
        }
        (e, _) => Ok(e),
    }
}
