use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::rope::{shared_table, DEFAULT_ROPE_BASE};
use super::{FullConfig, LchaConfig, LinearInputs, SsaConfig, TokenGrid, DENOM_EPS, LN_EPS};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::streaming::BlockCache;

/// Widths of the conditioning path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CondConfig {
    /// Sinusoidal timestep features.
    pub freq_dim: usize,
    /// Length of the opaque text embedding.
    pub text_dim: usize,
    /// Width of the shared conditioning vector fed to every block's AdaLN.
    pub cond_dim: usize,
}

impl Default for CondConfig {
    fn default() -> Self {
        Self { freq_dim: 16, text_dim: 8, cond_dim: 16 }
    }
}

/// `[cos(1000 t f_i), sin(1000 t f_i)]` with `f_i = 10000^(-i / (dim/2))`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = 1000.0 * t * f;
        out[i] = a.cos();
        out[half + i] = a.sin();
    }
    out
}

fn init(store: &mut ParamStore, name: String, shape: &[usize], rng: &mut Rng) -> ParamId {
    let fan_in = if shape.len() >= 2 { shape[shape.len() - 2] } else { shape[0] };
    store.normal(name, shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Timestep and text embedding shared by all blocks.
#[derive(Clone, Debug)]
pub struct CondEmbedder {
    cfg: CondConfig,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    wt: ParamId,
}

impl CondEmbedder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &CondConfig, rng: &mut Rng) -> Self {
        let e = cfg.cond_dim;
        Self {
            cfg: cfg.clone(),
            w1: init(store, format!("{prefix}.t1.w"), &[cfg.freq_dim, e], rng),
            b1: store.insert(format!("{prefix}.t1.b"), Tensor::zeros(&[e])),
            w2: init(store, format!("{prefix}.t2.w"), &[e, e], rng),
            b2: store.insert(format!("{prefix}.t2.b"), Tensor::zeros(&[e])),
            wt: init(store, format!("{prefix}.text.w"), &[cfg.text_dim, e], rng),
        }
    }

    pub fn config(&self) -> &CondConfig {
        &self.cfg
    }

    /// One conditioning row per frame, already passed through SiLU: `[frames, cond_dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, timesteps: &[f64], text: &Tensor) -> Result<Var> {
        if text.numel() != self.cfg.text_dim {
            return Err(Error::config("text", format!("embedding has {} values, expected {}", text.numel(), self.cfg.text_dim)));
        }
        if timesteps.is_empty() {
            return Err(Error::config("timesteps", "no frames"));
        }
        let f = timesteps.len();
        let feats: Vec<f64> = timesteps.iter().flat_map(|&t| timestep_embedding(t, self.cfg.freq_dim)).collect();
        let feats = tape.constant(Tensor::new(vec![f, self.cfg.freq_dim], feats)?);
        let texts = tape.constant(Tensor::new(vec![f, self.cfg.text_dim], text.data().repeat(f))?);
        let (w1, b1, w2, b2, wt) = (
            tape.param(store, self.w1),
            tape.param(store, self.b1),
            tape.param(store, self.w2),
            tape.param(store, self.b2),
            tape.param(store, self.wt),
        );
        let h = tape.linear(feats, w1, Some(b1))?;
        let h = tape.silu(h)?;
        let h = tape.linear(h, w2, Some(b2))?;
        let c = tape.linear(texts, wt, None)?;
        let h = tape.add(h, c)?;
        Ok(tape.silu(h)?)
    }
}

/// Per-token AdaLN modulation rows: shifts, `1 + scale` factors and sigmoid gates.
#[derive(Clone, Copy, Debug)]
pub struct AdaLnParams {
    pub shift_attn: Var,
    pub scale_attn: Var,
    pub gate_attn: Var,
    pub shift_mlp: Var,
    pub scale_mlp: Var,
    pub gate_mlp: Var,
}

/// Intermediate values captured by [`Block::forward`] when requested.
#[derive(Clone, Debug, Default)]
pub struct BlockTrace {
    /// Inputs of the linear-attention op of an LCHA block.
    pub linear_inputs: Option<LinearInputs>,
    pub linear_path: Option<Tensor>,
    pub conv_path: Option<Tensor>,
    pub gate: Option<f64>,
    pub mixed: Option<Tensor>,
    pub attn_queries: Option<usize>,
    pub attn_keys: Option<usize>,
}

/// Streaming cache of a block. With `commit` the current input is written to
/// the cache after use; otherwise the cache is read-only.
pub struct StreamSlot<'a> {
    pub cache: &'a mut BlockCache,
    pub commit: bool,
}

pub struct BlockCtx<'a> {
    pub grid: TokenGrid,
    /// Global index of the first input frame.
    pub frame_offset: usize,
    pub stream: Option<StreamSlot<'a>>,
    pub trace: Option<&'a mut BlockTrace>,
}

impl<'a> BlockCtx<'a> {
    pub fn offline(grid: TokenGrid) -> Self {
        Self { grid, frame_offset: 0, stream: None, trace: None }
    }
}

#[derive(Clone, Debug)]
pub enum Mixer {
    Lcha {
        cfg: LchaConfig,
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        wo: ParamId,
        bo: ParamId,
        kernel_w: ParamId,
        kernel_b: ParamId,
        conv_w: ParamId,
        conv_b: ParamId,
        mix_w: ParamId,
        mix_b: ParamId,
        alpha: ParamId,
    },
    Full {
        cfg: FullConfig,
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        wo: ParamId,
        bo: ParamId,
    },
}

/// Pre-norm transformer block with AdaLN modulation around the mixer and the MLP.
#[derive(Clone, Debug)]
pub struct Block {
    dim: usize,
    causal: bool,
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ada: (ParamId, ParamId),
    mixer: Mixer,
    mlp: (ParamId, ParamId, ParamId, ParamId),
}

/// Width settings shared by every block of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub dim: usize,
    pub mlp_hidden: usize,
    pub cond_dim: usize,
    pub causal: bool,
}

impl Block {
    fn common(store: &mut ParamStore, p: &str, s: &BlockShape, mixer: Mixer, rng: &mut Rng) -> Self {
        let c = s.dim;
        let ln1 = (store.insert(format!("{p}.ln1.g"), Tensor::ones(&[c])), store.insert(format!("{p}.ln1.b"), Tensor::zeros(&[c])));
        let ln2 = (store.insert(format!("{p}.ln2.g"), Tensor::ones(&[c])), store.insert(format!("{p}.ln2.b"), Tensor::zeros(&[c])));
        let ada = (
            store.normal(format!("{p}.ada.w"), &[s.cond_dim, 6 * c], 0.02, rng),
            store.insert(format!("{p}.ada.b"), Tensor::zeros(&[6 * c])),
        );
        let mlp = (
            init(store, format!("{p}.mlp.w1"), &[c, s.mlp_hidden], rng),
            store.insert(format!("{p}.mlp.b1"), Tensor::zeros(&[s.mlp_hidden])),
            init(store, format!("{p}.mlp.w2"), &[s.mlp_hidden, c], rng),
            store.insert(format!("{p}.mlp.b2"), Tensor::zeros(&[c])),
        );
        Self { dim: c, causal: s.causal, ln1, ln2, ada, mixer, mlp }
    }

    pub fn lcha(store: &mut ParamStore, prefix: &str, shape: &BlockShape, cfg: &LchaConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, h, dh, dk) = (shape.dim, cfg.heads, cfg.head_dim, cfg.kernel_dim());
        let [kt, kh, kw] = cfg.conv_kernel;
        let p = format!("{prefix}.attn");
        let mixer = Mixer::Lcha {
            cfg: cfg.clone(),
            wq: init(store, format!("{p}.wq"), &[c, h * dh], rng),
            wk: init(store, format!("{p}.wk"), &[c, h * dh], rng),
            wv: init(store, format!("{p}.wv"), &[c, h * dh], rng),
            wo: init(store, format!("{p}.wo"), &[h * dh, c], rng),
            bo: store.insert(format!("{p}.bo"), Tensor::zeros(&[c])),
            kernel_w: init(store, format!("{p}.kernel.w"), &[h, dh, dk], rng),
            kernel_b: store.insert(format!("{p}.kernel.b"), Tensor::zeros(&[h * dk])),
            conv_w: store.normal(format!("{p}.conv.w"), &[kt, kh, kw, c], 1.0 / ((kt * kh * kw) as f64).sqrt(), rng),
            conv_b: store.insert(format!("{p}.conv.b"), Tensor::zeros(&[c])),
            mix_w: init(store, format!("{p}.mix.w"), &[c, c], rng),
            mix_b: store.insert(format!("{p}.mix.b"), Tensor::zeros(&[c])),
            alpha: store.insert(format!("{p}.alpha"), Tensor::scalar(cfg.alpha_init)),
        };
        Ok(Self::common(store, prefix, shape, mixer, rng))
    }

    pub fn full(store: &mut ParamStore, prefix: &str, shape: &BlockShape, cfg: &FullConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, inner) = (shape.dim, cfg.heads * cfg.head_dim);
        let p = format!("{prefix}.attn");
        let mixer = Mixer::Full {
            cfg: cfg.clone(),
            wq: init(store, format!("{p}.wq"), &[c, inner], rng),
            wk: init(store, format!("{p}.wk"), &[c, inner], rng),
            wv: init(store, format!("{p}.wv"), &[c, inner], rng),
            wo: init(store, format!("{p}.wo"), &[inner, c], rng),
            bo: store.insert(format!("{p}.bo"), Tensor::zeros(&[c])),
        };
        Ok(Self::common(store, prefix, shape, mixer, rng))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mixer(&self) -> &Mixer {
        &self.mixer
    }

    pub fn is_lcha(&self) -> bool {
        matches!(self.mixer, Mixer::Lcha { .. })
    }

    /// Parameter id of the fusion gate logit, for LCHA blocks.
    pub fn alpha(&self) -> Option<ParamId> {
        match self.mixer {
            Mixer::Lcha { alpha, .. } => Some(alpha),
            Mixer::Full { .. } => None,
        }
    }

    /// Empty streaming cache matching this block on `grid` (the block's own resolution).
    pub fn new_cache(&self, grid: &TokenGrid, window: Option<usize>) -> BlockCache {
        match &self.mixer {
            Mixer::Lcha { cfg, .. } => BlockCache::Lcha {
                lin: crate::streaming::LinAttnState::new(cfg.heads, cfg.kernel_dim(), cfg.head_dim),
                ring: crate::streaming::ConvRing::new(cfg.conv_kernel[0] - 1, grid.tokens_per_frame() * self.dim),
            },
            Mixer::Full { .. } => BlockCache::Attention { kv: crate::streaming::SsaKvWindow::new(window) },
        }
    }

    /// Modulation rows from `cond: [frames, cond_dim]`, each repeated for the frame's tokens.
    pub fn modulation(&self, tape: &mut Tape, store: &ParamStore, cond: Var, tokens_per_frame: usize) -> Result<AdaLnParams> {
        let (w, b) = (tape.param(store, self.ada.0), tape.param(store, self.ada.1));
        let m = tape.linear(cond, w, Some(b))?;
        let c = self.dim;
        let part = |tape: &mut Tape, i: usize| -> Result<Var> {
            let s = tape.slice_cols(m, i * c, c)?;
            Ok(tape.expand_rows(s, tokens_per_frame)?)
        };
        let shift_attn = part(tape, 0)?;
        let scale_attn = part(tape, 1)?;
        let gate_attn = part(tape, 2)?;
        let shift_mlp = part(tape, 3)?;
        let scale_mlp = part(tape, 4)?;
        let gate_mlp = part(tape, 5)?;
        Ok(AdaLnParams {
            shift_attn,
            scale_attn: tape.affine(scale_attn, 1.0, 1.0)?,
            gate_attn: tape.sigmoid(gate_attn)?,
            shift_mlp,
            scale_mlp: tape.affine(scale_mlp, 1.0, 1.0)?,
            gate_mlp: tape.sigmoid(gate_mlp)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, cond: Var, ctx: &mut BlockCtx) -> Result<Var> {
        let frames = tape.value(cond).rows();
        if frames != ctx.grid.frames {
            return Err(Error::config("cond", format!("{frames} conditioning rows for {} frames", ctx.grid.frames)));
        }
        let ada = self.modulation(tape, store, cond, ctx.grid.tokens_per_frame())?;
        self.forward_with(tape, store, x, &ada, ctx)
    }

    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, x: Var, ada: &AdaLnParams, ctx: &mut BlockCtx) -> Result<Var> {
        let xs = tape.value(x).shape().to_vec();
        if xs != [ctx.grid.tokens(), self.dim] {
            return Err(Error::config("block input", format!("{xs:?} vs grid {:?} with C={}", ctx.grid, self.dim)));
        }
        let (g1, b1) = (tape.param(store, self.ln1.0), tape.param(store, self.ln1.1));
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let h = tape.mul(h, ada.scale_attn)?;
        let h = tape.add(h, ada.shift_attn)?;
        let mix = self.mix(tape, store, h, ctx)?;
        let mix = tape.mul(mix, ada.gate_attn)?;
        let x = tape.add(x, mix)?;

        let (g2, b2) = (tape.param(store, self.ln2.0), tape.param(store, self.ln2.1));
        let h = tape.layer_norm(x, g2, b2, LN_EPS)?;
        let h = tape.mul(h, ada.scale_mlp)?;
        let h = tape.add(h, ada.shift_mlp)?;
        let (w1, bb1, w2, bb2) =
            (tape.param(store, self.mlp.0), tape.param(store, self.mlp.1), tape.param(store, self.mlp.2), tape.param(store, self.mlp.3));
        let h = tape.linear(h, w1, Some(bb1))?;
        let h = tape.silu(h)?;
        let h = tape.linear(h, w2, Some(bb2))?;
        let h = tape.mul(h, ada.gate_mlp)?;
        Ok(tape.add(x, h)?)
    }

    fn mix(&self, tape: &mut Tape, store: &ParamStore, h: Var, ctx: &mut BlockCtx) -> Result<Var> {
        match &self.mixer {
            Mixer::Lcha { cfg, wq, wk, wv, wo, bo, kernel_w, kernel_b, conv_w, conv_b, mix_w, mix_b, alpha } => {
                let heads = cfg.heads;
                let (wq, wk, wv) = (tape.param(store, *wq), tape.param(store, *wk), tape.param(store, *wv));
                let mut q = tape.matmul(h, wq)?;
                let mut k = tape.matmul(h, wk)?;
                let v = tape.matmul(h, wv)?;
                if cfg.qk_norm {
                    q = tape.head_layer_norm(q, heads, LN_EPS)?;
                    k = tape.head_layer_norm(k, heads, LN_EPS)?;
                }
                let (kw, kb) = (tape.param(store, *kernel_w), tape.param(store, *kernel_b));
                let fq = tape.head_linear(q, kw, heads)?;
                let fq = tape.add_row(fq, kb)?;
                let fq = tape.softplus(fq)?;
                let fk = tape.head_linear(k, kw, heads)?;
                let fk = tape.add_row(fk, kb)?;
                let fk = tape.softplus(fk)?;
                let rope = if cfg.rope {
                    Some(shared_table(&ctx.grid, ctx.frame_offset, cfg.kernel_dim(), DEFAULT_ROPE_BASE)?)
                } else {
                    None
                };
                let (prefix, history) = match ctx.stream.as_ref().map(|s| &*s.cache) {
                    None => (None, None),
                    Some(BlockCache::Lcha { lin, ring }) => {
                        if !self.causal {
                            return Err(Error::StateMismatch("streaming needs causal blocks".into()));
                        }
                        (Some(lin.prefix()), ring.history(self.dim))
                    }
                    Some(_) => return Err(Error::StateMismatch("LCHA block given an attention cache".into())),
                };
                let lin = tape.linear_attention(fq, fk, v, heads, self.causal, DENOM_EPS, rope.clone(), prefix)?;
                let (wo, bo) = (tape.param(store, *wo), tape.param(store, *bo));
                let lin = tape.linear(lin, wo, Some(bo))?;

                let [kt, kh, kwid] = cfg.conv_kernel;
                let (cw, cb) = (tape.param(store, *conv_w), tape.param(store, *conv_b));
                let conv = tape.depthwise_conv3d(h, cw, cb, ctx.grid.grid3(), (kt, kh, kwid), history)?;
                let (mw, mb) = (tape.param(store, *mix_w), tape.param(store, *mix_b));
                let conv = tape.linear(conv, mw, Some(mb))?;

                let a = tape.param(store, *alpha);
                let g = tape.sigmoid(a)?;
                let one_minus = tape.affine(g, -1.0, 1.0)?;
                let l = tape.mul_scalar(lin, g)?;
                let r = tape.mul_scalar(conv, one_minus)?;
                let out = tape.add(l, r)?;

                if let Some(slot) = ctx.stream.as_mut() {
                    if slot.commit {
                        if let BlockCache::Lcha { lin: state, ring } = &mut *slot.cache {
                            state.absorb(tape.value(fk), tape.value(v), rope.as_deref())?;
                            ring.push_frames(tape.value(h))?;
                        }
                    }
                }
                if let Some(t) = ctx.trace.as_deref_mut() {
                    t.linear_inputs = Some(LinearInputs {
                        fq: tape.value(fq).clone(),
                        fk: tape.value(fk).clone(),
                        v: tape.value(v).clone(),
                        heads,
                        causal: self.causal,
                        rope: rope.clone(),
                    });
                    t.linear_path = Some(tape.value(lin).clone());
                    t.conv_path = Some(tape.value(conv).clone());
                    t.gate = Some(tape.value(g).data()[0]);
                    t.mixed = Some(tape.value(out).clone());
                }
                Ok(out)
            }
            Mixer::Full { cfg, wq, wk, wv, wo, bo } => {
                let heads = cfg.heads;
                let (wq, wk, wv) = (tape.param(store, *wq), tape.param(store, *wk), tape.param(store, *wv));
                let mut q = tape.matmul(h, wq)?;
                let mut k = tape.matmul(h, wk)?;
                let v = tape.matmul(h, wv)?;
                if cfg.qk_norm {
                    q = tape.head_layer_norm(q, heads, LN_EPS)?;
                    k = tape.head_layer_norm(k, heads, LN_EPS)?;
                }
                if cfg.rope {
                    let table = shared_table(&ctx.grid, ctx.frame_offset, cfg.head_dim, DEFAULT_ROPE_BASE)?;
                    q = tape.rope(q, Arc::clone(&table))?;
                    k = tape.rope(k, table)?;
                }
                let prefix = match ctx.stream.as_ref().map(|s| &*s.cache) {
                    None => None,
                    Some(BlockCache::Attention { kv }) => {
                        if !self.causal {
                            return Err(Error::StateMismatch("streaming needs causal blocks".into()));
                        }
                        kv.prefix()?
                    }
                    Some(_) => return Err(Error::StateMismatch("attention block given an LCHA cache".into())),
                };
                let visible = prefix.as_ref().map_or(0, |p| p.keys.rows());
                let y = tape.attention(q, k, v, heads, self.causal, prefix)?;
                let (wo, bo) = (tape.param(store, *wo), tape.param(store, *bo));
                let out = tape.linear(y, wo, Some(bo))?;
                if let Some(slot) = ctx.stream.as_mut() {
                    if slot.commit {
                        if let BlockCache::Attention { kv } = &mut *slot.cache {
                            kv.push(tape.value(k).clone(), tape.value(v).clone());
                        }
                    }
                }
                if let Some(t) = ctx.trace.as_deref_mut() {
                    t.attn_queries = Some(ctx.grid.tokens());
                    t.attn_keys = Some(visible + ctx.grid.tokens());
                    t.mixed = Some(tape.value(out).clone());
                }
                Ok(out)
            }
        }
    }
}

/// Space-to-channel by `stride` followed by a projection to `low_dim`, and the
/// reverse projection followed by channel-to-space.
#[derive(Clone, Debug)]
pub struct Resampler {
    stride: usize,
    dim: usize,
    low_dim: usize,
    down_w: ParamId,
    down_b: ParamId,
    up_w: ParamId,
    up_b: ParamId,
}

impl Resampler {
    pub fn new(store: &mut ParamStore, prefix: &str, stride: usize, dim: usize, low_dim: usize, rng: &mut Rng) -> Self {
        let packed = stride * stride * dim;
        Self {
            stride,
            dim,
            low_dim,
            down_w: init(store, format!("{prefix}.down.w"), &[packed, low_dim], rng),
            down_b: store.insert(format!("{prefix}.down.b"), Tensor::zeros(&[low_dim])),
            up_w: init(store, format!("{prefix}.up.w"), &[low_dim, packed], rng),
            up_b: store.insert(format!("{prefix}.up.b"), Tensor::zeros(&[packed])),
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn low_dim(&self) -> usize {
        self.low_dim
    }

    /// Sets both projections to the identity; needs `low_dim == stride^2 * dim`.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        let packed = self.stride * self.stride * self.dim;
        if packed != self.low_dim {
            return Err(Error::config("ssa.low_dim", format!("identity projection needs low_dim = {packed}")));
        }
        store.set(self.down_w, Tensor::eye(packed))?;
        store.set(self.up_w, Tensor::eye(packed))?;
        store.set(self.down_b, Tensor::zeros(&[packed]))?;
        store.set(self.up_b, Tensor::zeros(&[packed]))?;
        Ok(())
    }

    pub fn low_grid(&self, grid: &TokenGrid) -> Result<TokenGrid> {
        Ok(grid.downsampled(self.stride)?.with_channels(self.low_dim))
    }

    pub fn down(&self, tape: &mut Tape, store: &ParamStore, x: Var, grid: &TokenGrid) -> Result<Var> {
        grid.downsampled(self.stride)?;
        let packed = tape.space_to_channel(x, grid.grid3(), self.stride)?;
        let (w, b) = (tape.param(store, self.down_w), tape.param(store, self.down_b));
        Ok(tape.linear(packed, w, Some(b))?)
    }

    /// `low_grid` is the strided grid of `y`.
    pub fn up(&self, tape: &mut Tape, store: &ParamStore, y: Var, low_grid: &TokenGrid) -> Result<Var> {
        let (w, b) = (tape.param(store, self.up_w), tape.param(store, self.up_b));
        let packed = tape.linear(y, w, Some(b))?;
        Ok(tape.channel_to_space(packed, low_grid.grid3(), self.stride)?)
    }
}

/// Full attention block run on a strided copy of the grid.
#[derive(Clone, Debug)]
pub struct SsaBlock {
    cfg: SsaConfig,
    resample: Resampler,
    inner: Block,
}

impl SsaBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, shape: &BlockShape, cfg: &SsaConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let low = cfg.low_dim(shape.dim);
        let resample = Resampler::new(store, prefix, cfg.stride, shape.dim, low, rng);
        let inner_shape = BlockShape { dim: low, ..*shape };
        let inner = Block::full(store, &format!("{prefix}.inner"), &inner_shape, &cfg.attn, rng)?;
        Ok(Self { cfg: cfg.clone(), resample, inner })
    }

    pub fn config(&self) -> &SsaConfig {
        &self.cfg
    }

    pub fn resampler(&self) -> &Resampler {
        &self.resample
    }

    pub fn inner(&self) -> &Block {
        &self.inner
    }

    /// `ctx.grid` is the full-resolution grid; the inner block sees the strided one.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, cond: Var, ctx: &mut BlockCtx) -> Result<Var> {
        let high = ctx.grid;
        let low = self.resample.low_grid(&high)?;
        let d = self.resample.down(tape, store, x, &high)?;
        ctx.grid = low;
        let y = self.inner.forward(tape, store, d, cond, ctx);
        ctx.grid = high;
        let y = y?;
        self.resample.up(tape, store, y, &low)
    }
}
