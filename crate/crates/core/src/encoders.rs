//! Hierarchical windowed-attention image encoder and the metadata MLP.
//!
//! Tokens travel as `[batch, side * side, channels]` in row-major grid
//! order. Each stage runs its attention blocks at a fixed width; patch
//! merging between stages halves the grid side and doubles the width.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Ctx, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const NUM_STAGES: usize = 4;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub stage_dims: Vec<usize>,
    /// Tokens per window side; clamped to the grid side at small stages.
    pub window_size: usize,
    pub heads_per_stage: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub mlp_ratio: usize,
    pub shared_weights: bool,
    pub meta_hidden: Vec<usize>,
    pub meta_dim: usize,
    pub activation: Activation,
    /// Reserved; only 0 (identity) is accepted.
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            stage_dims: vec![16, 32, 64, 128],
            window_size: 4,
            heads_per_stage: vec![2, 2, 4, 4],
            blocks_per_stage: vec![1, 1, 1, 1],
            mlp_ratio: 4,
            shared_weights: true,
            meta_hidden: vec![64, 128],
            meta_dim: 20,
            activation: Activation::Gelu,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn grid_side(&self, stage: usize) -> usize {
        (self.image_size / self.patch_size) >> stage
    }

    /// Window side actually used at `stage`.
    pub fn window_at(&self, stage: usize) -> usize {
        self.window_size.min(self.grid_side(stage))
    }

    pub fn meta_feature_dim(&self) -> usize {
        *self.meta_hidden.last().unwrap_or(&self.meta_dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        for (name, len) in [
            ("stage_dims", self.stage_dims.len()),
            ("heads_per_stage", self.heads_per_stage.len()),
            ("blocks_per_stage", self.blocks_per_stage.len()),
        ] {
            if len != NUM_STAGES {
                return bad(format!("{name} needs {NUM_STAGES} entries, got {len}"));
            }
        }
        for s in 1..NUM_STAGES {
            if self.stage_dims[s] != 2 * self.stage_dims[s - 1] {
                return bad(format!(
                    "stage_dims must double per stage: {:?}",
                    self.stage_dims
                ));
            }
        }
        let side0 = self.image_size / self.patch_size;
        if !side0.is_multiple_of(1 << (NUM_STAGES - 1)) {
            return bad(format!(
                "token grid {side0} cannot be halved {} times",
                NUM_STAGES - 1
            ));
        }
        if self.window_size == 0 {
            return bad("window size must be positive".into());
        }
        for s in 0..NUM_STAGES {
            if !self.grid_side(s).is_multiple_of(self.window_at(s)) {
                return bad(format!(
                    "grid side {} at stage {s} not divisible by window {}",
                    self.grid_side(s),
                    self.window_at(s)
                ));
            }
            let h = self.heads_per_stage[s];
            if h == 0 || !self.stage_dims[s].is_multiple_of(h) {
                return bad(format!(
                    "{h} heads do not divide width {}",
                    self.stage_dims[s]
                ));
            }
        }
        if self.meta_dim != 20 {
            return bad(format!(
                "metadata encoding length must be 20, got {}",
                self.meta_dim
            ));
        }
        if self.meta_hidden.is_empty() {
            return bad("meta_hidden must name at least one layer".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.dropout != 0.0 {
            return bad("dropout is reserved; only 0 is supported".into());
        }
        Ok(())
    }
}

/// Per-stage token grid for one image stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageFeature {
    /// `[batch, side * side, channels]`
    pub tokens: Var,
    pub stage: usize,
    pub side: usize,
}

/// `[b, side*side, c]` -> `[b * nw * nw, w * w, c]`
pub fn partition_windows(tape: &mut Tape, x: Var, side: usize, window: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != side * side {
        return Err(Error::invalid(
            "partition_windows",
            format!("{s:?} for side {side}"),
        ));
    }
    if window == 0 || !side.is_multiple_of(window) {
        return Err(Error::Config(format!(
            "grid side {side} not divisible by window {window}"
        )));
    }
    let (b, c, nw) = (s[0], s[2], side / window);
    let x = tape.reshape(x, &[b, nw, window, nw, window, c])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(x, &[b * nw * nw, window * window, c])
}

/// Inverse of [`partition_windows`].
pub fn merge_windows(tape: &mut Tape, x: Var, side: usize, window: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let nw = side / window;
    let b = s[0] / (nw * nw);
    let c = s[2];
    let x = tape.reshape(x, &[b, nw, nw, window, window, c])?;
    let x = tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(x, &[b, side * side, c])
}

/// Cyclic shift of the token grid by `(-offset, -offset)`.
pub fn roll_grid(tape: &mut Tape, x: Var, side: usize, offset: isize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let b = s[0];
    let n = side as isize;
    let mut index = Vec::with_capacity(b * side * side);
    for bi in 0..b {
        for i in 0..side {
            for j in 0..side {
                let si = (i as isize + offset).rem_euclid(n) as usize;
                let sj = (j as isize + offset).rem_euclid(n) as usize;
                index.push(bi * side * side + si * side + sj);
            }
        }
    }
    let index: Arc<[usize]> = index.into();
    tape.gather_rows(x, index, &[b, side * side])
}

/// Self-attention inside non-overlapping windows.
pub fn window_self_attention(
    ctx: &mut Ctx,
    attn: &MultiHeadAttention,
    x: Var,
    side: usize,
    window: usize,
) -> Result<Var> {
    let w = partition_windows(ctx.tape, x, side, window)?;
    let out = attn.forward(ctx, w, w)?;
    merge_windows(ctx.tape, out, side, window)
}

/// Pre-norm windowed attention block with an MLP sublayer.
#[derive(Clone, Debug)]
pub struct WindowBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub shift: usize,
}

impl WindowBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        shift: usize,
        act: Activation,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(
                store,
                rng,
                &format!("{name}.mlp"),
                (dim, dim * mlp_ratio, dim),
                act,
            )?,
            shift,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, side: usize, window: usize) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        // shifted windows wrap around the grid; no attention mask is applied
        let h = if self.shift > 0 {
            roll_grid(ctx.tape, h, side, self.shift as isize)?
        } else {
            h
        };
        let h = window_self_attention(ctx, &self.attn, h, side, window)?;
        let h = if self.shift > 0 {
            roll_grid(ctx.tape, h, side, -(self.shift as isize))?
        } else {
            h
        };
        let x = ctx.tape.add(x, h)?;
        let h = self.norm2.forward(ctx, x)?;
        let h = self.mlp.forward(ctx, h)?;
        ctx.tape.add(x, h)
    }
}

/// 2x2 neighbourhood concatenation followed by a linear map to twice the width.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl PatchMerge {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim)?,
            proj: Linear::new(store, rng, &format!("{name}.proj"), 4 * dim, 2 * dim, false)?,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, f: StageFeature) -> Result<StageFeature> {
        let s = ctx.tape.shape(f.tokens).to_vec();
        if !f.side.is_multiple_of(2) {
            return Err(Error::invalid(
                "patch_merge",
                format!("odd grid side {}", f.side),
            ));
        }
        let (b, c, half) = (s[0], s[2], f.side / 2);
        let x = ctx.tape.reshape(f.tokens, &[b, half, 2, half, 2, c])?;
        let x = ctx.tape.permute(x, &[0, 1, 3, 4, 2, 5])?;
        let x = ctx.tape.reshape(x, &[b, half * half, 4 * c])?;
        let x = self.norm.forward(ctx, x)?;
        let tokens = self.proj.forward(ctx, x)?;
        Ok(StageFeature {
            tokens,
            stage: f.stage + 1,
            side: half,
        })
    }
}

/// One image backbone: patch embedding, four stages of blocks, three merges.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch: Linear,
    pub pos: String,
    pub stages: Vec<Vec<WindowBlock>>,
    pub merges: Vec<PatchMerge>,
    cfg: EncoderConfig,
}

impl ImageEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let d0 = cfg.stage_dims[0];
        let patch = Linear::new(
            store,
            rng,
            &format!("{name}.patch"),
            p * p * IMAGE_CHANNELS,
            d0,
            false,
        )?;
        let pos = format!("{name}.pos");
        let t0 = cfg.grid_side(0) * cfg.grid_side(0);
        store.insert(
            &pos,
            Tensor::from_fn(&[t0, d0], |_| rng.random_range(-0.02..0.02)),
        )?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut merges = Vec::with_capacity(NUM_STAGES - 1);
        for s in 0..NUM_STAGES {
            let dim = cfg.stage_dims[s];
            let window = cfg.window_at(s);
            let blocks = (0..cfg.blocks_per_stage[s])
                .map(|k| {
                    // odd blocks use shifted windows when the grid has more than one window
                    let shift = if k % 2 == 1 && window < cfg.grid_side(s) {
                        window / 2
                    } else {
                        0
                    };
                    WindowBlock::new(
                        store,
                        rng,
                        &format!("{name}.stage{s}.block{k}"),
                        dim,
                        cfg.heads_per_stage[s],
                        cfg.mlp_ratio,
                        shift,
                        cfg.activation,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            if s + 1 < NUM_STAGES {
                merges.push(PatchMerge::new(
                    store,
                    rng,
                    &format!("{name}.merge{s}"),
                    dim,
                )?);
            }
        }
        Ok(Self {
            patch,
            pos,
            stages,
            merges,
            cfg: cfg.clone(),
        })
    }

    /// `images: [batch, size, size, 3]` -> stage-0 tokens.
    pub fn patch_embed(&self, ctx: &mut Ctx, images: Var) -> Result<StageFeature> {
        let s = ctx.tape.shape(images).to_vec();
        let size = self.cfg.image_size;
        if s.len() != 4 || s[1] != size || s[2] != size || s[3] != IMAGE_CHANNELS {
            return Err(Error::shape(
                "patch_embed",
                &s,
                &[0, size, size, IMAGE_CHANNELS],
            ));
        }
        let (b, p) = (s[0], self.cfg.patch_size);
        let g = size / p;
        let x = ctx.tape.reshape(images, &[b, g, p, g, p, IMAGE_CHANNELS])?;
        let x = ctx.tape.permute(x, &[0, 1, 3, 2, 4, 5])?;
        let x = ctx.tape.reshape(x, &[b * g * g, p * p * IMAGE_CHANNELS])?;
        let x = self.patch.forward(ctx, x)?;
        let d0 = self.cfg.stage_dims[0];
        let x = ctx.tape.reshape(x, &[b, g * g, d0])?;
        let pos = ctx.param(&self.pos)?;
        let tokens = ctx.tape.add_bias(x, pos)?;
        Ok(StageFeature {
            tokens,
            stage: 0,
            side: g,
        })
    }

    /// Runs the attention blocks of one stage.
    pub fn run_stage(&self, ctx: &mut Ctx, f: StageFeature) -> Result<StageFeature> {
        let s = f.stage;
        let window = self.cfg.window_at(s);
        let mut x = f.tokens;
        for block in &self.stages[s] {
            x = block.forward(ctx, x, f.side, window)?;
        }
        Ok(StageFeature { tokens: x, ..f })
    }

    pub fn merge(&self, ctx: &mut Ctx, f: StageFeature) -> Result<StageFeature> {
        let m = self.merges.get(f.stage).ok_or_else(|| {
            Error::invalid("patch_merge", format!("no merge after stage {}", f.stage))
        })?;
        m.forward(ctx, f)
    }
}

/// The clinical and dermoscopic backbones, optionally sharing one parameter set.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub cli: ImageEncoder,
    pub der: ImageEncoder,
    pub shared: bool,
}

impl DualEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &EncoderConfig) -> Result<Self> {
        if cfg.shared_weights {
            let enc = ImageEncoder::new(store, rng, "enc.shared", cfg)?;
            Ok(Self {
                cli: enc.clone(),
                der: enc,
                shared: true,
            })
        } else {
            Ok(Self {
                cli: ImageEncoder::new(store, rng, "enc.cli", cfg)?,
                der: ImageEncoder::new(store, rng, "enc.der", cfg)?,
                shared: false,
            })
        }
    }

    /// Runs stage `stage` on both streams.
    pub fn dual_stream_stage(
        &self,
        ctx: &mut Ctx,
        f_cli: StageFeature,
        f_der: StageFeature,
    ) -> Result<(StageFeature, StageFeature)> {
        let (sc, sd) = (
            ctx.tape.shape(f_cli.tokens).to_vec(),
            ctx.tape.shape(f_der.tokens).to_vec(),
        );
        if sc != sd || f_cli.stage != f_der.stage {
            return Err(Error::shape("dual_stream_stage", &sc, &sd));
        }
        Ok((
            self.cli.run_stage(ctx, f_cli)?,
            self.der.run_stage(ctx, f_der)?,
        ))
    }
}

/// Metadata MLP: `meta_dim -> meta_hidden[0] -> ... -> meta_hidden[last]`.
#[derive(Clone, Debug)]
pub struct MetaEncoder {
    pub layers: Vec<Linear>,
    pub act: Activation,
    pub in_dim: usize,
}

impl MetaEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &EncoderConfig) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = cfg.meta_dim;
        for (i, &h) in cfg.meta_hidden.iter().enumerate() {
            layers.push(Linear::new(
                store,
                rng,
                &format!("meta.fc{i}"),
                prev,
                h,
                true,
            )?);
            prev = h;
        }
        Ok(Self {
            layers,
            act: cfg.activation,
            in_dim: cfg.meta_dim,
        })
    }

    /// `meta: [batch, 20]` -> `[batch, feature_dim]`
    pub fn forward(&self, ctx: &mut Ctx, meta: Var) -> Result<Var> {
        let s = ctx.tape.shape(meta).to_vec();
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::shape("encode_metadata", &s, &[0, self.in_dim]));
        }
        let mut x = meta;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(ctx, x)?;
            if i + 1 < self.layers.len() {
                x = self.act.apply(ctx.tape, x)?;
            }
        }
        Ok(x)
    }
}
