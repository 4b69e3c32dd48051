use serde::{Deserialize, Serialize};

use super::masks::triggers;
use crate::attention::{Block, BlockCtx, BlockShape, CondConfig, CondEmbedder, LchaConfig, Resampler, SsaConfig, StreamSlot, TokenGrid, LN_EPS};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::streaming::BlockCache;

/// Mixer used by the high-resolution groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HighMixer {
    #[default]
    Lcha,
    /// Full attention at full resolution (with `ssa.attn` settings); used for teachers.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent channels in and out.
    pub in_channels: usize,
    pub dim: usize,
    pub mlp_hidden: usize,
    /// Number of routing groups `M`.
    pub groups: usize,
    /// Blocks per group.
    pub group_size: usize,
    pub causal: bool,
    pub cond: CondConfig,
    pub lcha: LchaConfig,
    pub ssa: SsaConfig,
    pub high_mixer: HighMixer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            dim: 16,
            mlp_hidden: 32,
            groups: 3,
            group_size: 2,
            causal: true,
            cond: CondConfig::default(),
            lcha: LchaConfig { head_dim: 8, ..LchaConfig::default() },
            ssa: SsaConfig::default(),
            high_mixer: HighMixer::Lcha,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("in_channels", self.in_channels), ("dim", self.dim), ("mlp_hidden", self.mlp_hidden), ("group_size", self.group_size)] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.groups < 2 {
            return Err(Error::config("groups", format!("need at least 2 groups, got {}", self.groups)));
        }
        if !self.cond.freq_dim.is_multiple_of(2) || self.cond.cond_dim == 0 {
            return Err(Error::config("cond", "freq_dim must be even and cond_dim positive"));
        }
        self.lcha.validate()?;
        self.ssa.validate()
    }

    pub fn blocks(&self) -> usize {
        self.groups * self.group_size
    }

    fn shape(&self) -> BlockShape {
        BlockShape { dim: self.dim, mlp_hidden: self.mlp_hidden, cond_dim: self.cond.cond_dim, causal: self.causal }
    }
}

/// One routing group: `group_size` high-resolution blocks, `group_size`
/// low-resolution full-attention blocks and the group's resampler.
#[derive(Clone, Debug)]
pub struct Group {
    pub high: Vec<Block>,
    pub low: Vec<Block>,
    pub resample: Resampler,
}

/// Per-group streaming caches; only the branch a hard mask selects is populated.
#[derive(Clone, Debug)]
pub struct GroupCache {
    pub high: Option<Vec<BlockCache>>,
    pub low: Option<Vec<BlockCache>>,
}

#[derive(Clone, Debug)]
pub struct ModelCache {
    pub mask: Vec<u8>,
    pub groups: Vec<GroupCache>,
}

impl ModelCache {
    pub fn reset(&mut self) {
        for g in &mut self.groups {
            for c in g.high.iter_mut().chain(g.low.iter_mut()).flatten() {
                c.reset();
            }
        }
    }

    pub fn caches(&self) -> impl Iterator<Item = &BlockCache> {
        self.groups.iter().flat_map(|g| g.high.iter().chain(g.low.iter()).flatten())
    }
}

/// Stream values after one group, as seen by the routing algebra.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupTrace {
    pub m: f64,
    pub u: f64,
    pub d: f64,
    pub y_l: Tensor,
    /// `None` while the low stream has not been materialized (hard mode only).
    pub y_s: Option<Tensor>,
    pub skip: Tensor,
    pub ran_high: bool,
    pub ran_low: bool,
}

pub enum Routing<'a> {
    Hard(&'a [u8]),
    /// One `[1]`-shaped gate per group, typically straight-through samples.
    Soft(&'a [Var]),
}

#[derive(Default)]
pub struct ForwardCtx<'a> {
    pub frame_offset: usize,
    pub stream: Option<&'a mut ModelCache>,
    pub commit: bool,
    pub trace: Option<&'a mut Vec<GroupTrace>>,
}

#[derive(Clone, Debug)]
pub struct SandwichModel {
    cfg: ModelConfig,
    embed: (ParamId, ParamId),
    cond: CondEmbedder,
    groups: Vec<Group>,
    final_ln: (ParamId, ParamId),
    final_ada: (ParamId, ParamId),
    out: (ParamId, ParamId),
}

impl SandwichModel {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, e) = (cfg.dim, cfg.cond.cond_dim);
        let embed = (
            store.normal("embed.w", &[cfg.in_channels, c], 1.0 / (cfg.in_channels as f64).sqrt(), rng),
            store.insert("embed.b", Tensor::zeros(&[c])),
        );
        let cond = CondEmbedder::new(store, "cond", &cfg.cond, rng);
        let shape = cfg.shape();
        let low = cfg.ssa.low_dim(c);
        let low_shape = BlockShape { dim: low, ..shape };
        let mut groups = Vec::with_capacity(cfg.groups);
        for n in 0..cfg.groups {
            let mut high = Vec::with_capacity(cfg.group_size);
            let mut lo = Vec::with_capacity(cfg.group_size);
            for i in 0..cfg.group_size {
                let p = format!("g{n}.hi.{i}");
                high.push(match cfg.high_mixer {
                    HighMixer::Lcha => Block::lcha(store, &p, &shape, &cfg.lcha, rng)?,
                    HighMixer::Full => Block::full(store, &p, &shape, &cfg.ssa.attn, rng)?,
                });
                lo.push(Block::full(store, &format!("g{n}.lo.{i}"), &low_shape, &cfg.ssa.attn, rng)?);
            }
            let resample = Resampler::new(store, &format!("g{n}.rs"), cfg.ssa.stride, c, low, rng);
            // start as a plain pixel shuffle when the widths allow it
            if low == cfg.ssa.stride * cfg.ssa.stride * c {
                resample.set_identity(store)?;
            }
            groups.push(Group { high, low: lo, resample });
        }
        let final_ln = (store.insert("final.ln.g", Tensor::ones(&[c])), store.insert("final.ln.b", Tensor::zeros(&[c])));
        let final_ada = (store.normal("final.ada.w", &[e, 2 * c], 0.02, rng), store.insert("final.ada.b", Tensor::zeros(&[2 * c])));
        let out = (
            store.normal("out.w", &[c, cfg.in_channels], 1.0 / (c as f64).sqrt(), rng),
            store.insert("out.b", Tensor::zeros(&[cfg.in_channels])),
        );
        Ok(Self { cfg: cfg.clone(), embed, cond, groups, final_ln, final_ada, out })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    /// Latent grid with the model's input channels.
    pub fn check_grid(&self, grid: &TokenGrid) -> Result<()> {
        if grid.channels != self.cfg.in_channels {
            return Err(Error::config("grid", format!("{} channels, model expects {}", grid.channels, self.cfg.in_channels)));
        }
        grid.downsampled(self.cfg.ssa.stride)?;
        Ok(())
    }

    pub fn check_mask(&self, mask: &[u8]) -> Result<()> {
        if mask.len() != self.cfg.groups || mask.first() != Some(&1) || mask.last() != Some(&1) || mask.iter().any(|&b| b > 1) {
            return Err(Error::Layout(format!("mask {mask:?} is not a legal {}-group mask", self.cfg.groups)));
        }
        Ok(())
    }

    /// Empty streaming caches for the branches `mask` selects.
    pub fn new_cache(&self, mask: &[u8], grid: &TokenGrid, window: Option<usize>) -> Result<ModelCache> {
        self.check_mask(mask)?;
        self.check_grid(grid)?;
        let low_grid = self.groups[0].resample.low_grid(grid)?;
        let groups = self
            .groups
            .iter()
            .zip(mask)
            .map(|(g, &m)| {
                if m == 1 {
                    GroupCache { high: Some(g.high.iter().map(|b| b.new_cache(grid, None)).collect()), low: None }
                } else {
                    GroupCache { high: None, low: Some(g.low.iter().map(|b| b.new_cache(&low_grid, window)).collect()) }
                }
            })
            .collect();
        Ok(ModelCache { mask: mask.to_vec(), groups })
    }

    /// Token embedding `[tokens, in_channels] -> [tokens, dim]`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.embed.0), tape.param(store, self.embed.1));
        Ok(tape.linear(x, w, Some(b))?)
    }

    pub fn condition(&self, tape: &mut Tape, store: &ParamStore, timesteps: &[f64], text: &Tensor) -> Result<Var> {
        self.cond.forward(tape, store, timesteps, text)
    }

    /// Runs the high blocks of group `n` on `x` at full resolution.
    pub fn run_high(&self, tape: &mut Tape, store: &ParamStore, n: usize, x: Var, cond: Var, grid: &TokenGrid, fctx: &mut ForwardCtx) -> Result<Var> {
        let mut h = x;
        let grid = grid.with_channels(self.cfg.dim);
        for (i, block) in self.groups[n].high.iter().enumerate() {
            let mut ctx = BlockCtx { grid, frame_offset: fctx.frame_offset, stream: None, trace: None };
            if let Some(cache) = fctx.stream.as_deref_mut() {
                let slot = cache.groups[n].high.as_mut().and_then(|c| c.get_mut(i));
                let slot = slot.ok_or_else(|| Error::StateMismatch(format!("no high-branch cache for group {n}")))?;
                ctx.stream = Some(StreamSlot { cache: slot, commit: fctx.commit });
            }
            h = block.forward(tape, store, h, cond, &mut ctx)?;
        }
        Ok(h)
    }

    /// Runs the low blocks of group `n` on `x`, which lives on the strided grid.
    pub fn run_low(&self, tape: &mut Tape, store: &ParamStore, n: usize, x: Var, cond: Var, grid: &TokenGrid, fctx: &mut ForwardCtx) -> Result<Var> {
        let low = self.groups[n].resample.low_grid(grid)?;
        let mut h = x;
        for (i, block) in self.groups[n].low.iter().enumerate() {
            let mut ctx = BlockCtx { grid: low, frame_offset: fctx.frame_offset, stream: None, trace: None };
            if let Some(cache) = fctx.stream.as_deref_mut() {
                let slot = cache.groups[n].low.as_mut().and_then(|c| c.get_mut(i));
                let slot = slot.ok_or_else(|| Error::StateMismatch(format!("no low-branch cache for group {n}")))?;
                ctx.stream = Some(StreamSlot { cache: slot, commit: fctx.commit });
            }
            h = block.forward(tape, store, h, cond, &mut ctx)?;
        }
        Ok(h)
    }

    pub fn down(&self, tape: &mut Tape, store: &ParamStore, n: usize, x: Var, grid: &TokenGrid) -> Result<Var> {
        self.groups[n].resample.down(tape, store, x, grid)
    }

    pub fn up(&self, tape: &mut Tape, store: &ParamStore, n: usize, y: Var, grid: &TokenGrid) -> Result<Var> {
        let low = self.groups[n].resample.low_grid(grid)?;
        self.groups[n].resample.up(tape, store, y, &low)
    }

    /// Final AdaLN-modulated norm and output projection back to latent channels.
    pub fn head(&self, tape: &mut Tape, store: &ParamStore, y: Var, cond: Var, grid: &TokenGrid) -> Result<Var> {
        let c = self.cfg.dim;
        let tpf = grid.tokens_per_frame();
        let (aw, ab) = (tape.param(store, self.final_ada.0), tape.param(store, self.final_ada.1));
        let m = tape.linear(cond, aw, Some(ab))?;
        let shift = tape.slice_cols(m, 0, c)?;
        let shift = tape.expand_rows(shift, tpf)?;
        let scale = tape.slice_cols(m, c, c)?;
        let scale = tape.expand_rows(scale, tpf)?;
        let scale = tape.affine(scale, 1.0, 1.0)?;
        let (g, b) = (tape.param(store, self.final_ln.0), tape.param(store, self.final_ln.1));
        let h = tape.layer_norm(y, g, b, LN_EPS)?;
        let h = tape.mul(h, scale)?;
        let h = tape.add(h, shift)?;
        let (w, b) = (tape.param(store, self.out.0), tape.param(store, self.out.1));
        Ok(tape.linear(h, w, Some(b))?)
    }

    /// Full denoiser: `x: [tokens, in_channels]` on `grid`, one timestep per frame.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        grid: &TokenGrid,
        timesteps: &[f64],
        text: &Tensor,
        routing: Routing,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.check_grid(grid)?;
        if timesteps.len() != grid.frames {
            return Err(Error::config("timesteps", format!("{} timesteps for {} frames", timesteps.len(), grid.frames)));
        }
        let cond = self.condition(tape, store, timesteps, text)?;
        let h0 = self.embed(tape, store, x)?;
        let y = match routing {
            Routing::Hard(mask) => self.route_hard(tape, store, h0, cond, grid, mask, ctx)?,
            Routing::Soft(gates) => self.route_soft(tape, store, h0, cond, grid, gates, ctx)?,
        };
        self.head(tape, store, y, cond, grid)
    }

    /// Hard routing on the embedded tokens `h0`. Only the selected branch of each
    /// group is evaluated, and `down`/`up` run only on switches.
    #[allow(clippy::too_many_arguments)]
    pub fn route_hard(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h0: Var,
        cond: Var,
        grid: &TokenGrid,
        mask: &[u8],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        self.check_mask(mask)?;
        if let Some(cache) = ctx.stream.as_deref() {
            if cache.mask != mask {
                return Err(Error::StateMismatch(format!("cache built for mask {:?}, routing {mask:?}", cache.mask)));
            }
        }
        let mut y_l = h0;
        let mut y_s: Option<Var> = None;
        let mut skip = tape.constant(Tensor::zeros(tape.value(h0).shape()));
        let mut m_prev = 1u8;
        for (n, &m) in mask.iter().enumerate() {
            let (u, d) = triggers(m_prev, m);
            if m == 1 {
                let x_l = if u == 1 {
                    let ys = y_s.ok_or_else(|| Error::Layout("low stream switched up before it was produced".into()))?;
                    let up = self.up(tape, store, n, ys, grid)?;
                    tape.add(up, skip)?
                } else {
                    y_l
                };
                y_l = self.run_high(tape, store, n, x_l, cond, grid, ctx)?;
            } else {
                let x_s = if d == 1 {
                    skip = y_l;
                    self.down(tape, store, n, y_l, grid)?
                } else {
                    y_s.ok_or_else(|| Error::Layout("low stream used before it was produced".into()))?
                };
                y_s = Some(self.run_low(tape, store, n, x_s, cond, grid, ctx)?);
            }
            if let Some(trace) = ctx.trace.as_deref_mut() {
                trace.push(GroupTrace {
                    m: m as f64,
                    u: u as f64,
                    d: d as f64,
                    y_l: tape.value(y_l).clone(),
                    y_s: y_s.map(|v| tape.value(v).clone()),
                    skip: tape.value(skip).clone(),
                    ran_high: m == 1,
                    ran_low: m == 0,
                });
            }
            m_prev = m;
        }
        if mask[mask.len() - 1] == 1 {
            Ok(y_l)
        } else {
            let ys = y_s.expect("last group ran low");
            self.up(tape, store, mask.len() - 1, ys, grid)
        }
    }

    /// Relaxed routing: both branches run in every group and the streams are
    /// blended by the gates.
    ///
    /// Triggers are `u = m (1 - m_prev)` and `d = m_prev (1 - m)`, equal to
    /// `max(m - m_prev, 0)` and `max(m_prev - m, 0)` on binary gates. Unlike the
    /// max form they have nonzero slope at `m = m_prev`, so a straight-through
    /// gradient sees the switch a flipped gate would cause.
    ///
    /// `x_L = u (up(y_S) + S) + (1-u) y_L`, `x_S = d down(y_L) + (1-d) y_S`,
    /// `S <- d y_L + (1-d) S`, `y_L <- m f_L(x_L) + (1-m) y_L`,
    /// `y_S <- (1-m) f_S(x_S) + m y_S`, output `m_M y_L + (1-m_M) up(y_S)`.
    #[allow(clippy::too_many_arguments)]
    pub fn route_soft(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h0: Var,
        cond: Var,
        grid: &TokenGrid,
        gates: &[Var],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        if gates.len() != self.cfg.groups {
            return Err(Error::Layout(format!("{} gates for {} groups", gates.len(), self.cfg.groups)));
        }
        if ctx.stream.is_some() {
            return Err(Error::StateMismatch("soft routing does not stream".into()));
        }
        let mut y_l = h0;
        let mut y_s = self.down(tape, store, 0, h0, grid)?;
        let mut skip = tape.constant(Tensor::zeros(tape.value(h0).shape()));
        let mut m_prev = tape.constant(Tensor::ones(&[1]));
        for (n, &m) in gates.iter().enumerate() {
            let not_m = tape.affine(m, -1.0, 1.0)?;
            let not_prev = tape.affine(m_prev, -1.0, 1.0)?;
            let u = tape.mul(m, not_prev)?;
            let d = tape.mul(m_prev, not_m)?;
            let not_u = tape.affine(u, -1.0, 1.0)?;
            let not_d = tape.affine(d, -1.0, 1.0)?;

            let up = self.up(tape, store, n, y_s, grid)?;
            let up = tape.add(up, skip)?;
            let a = tape.mul_scalar(up, u)?;
            let b = tape.mul_scalar(y_l, not_u)?;
            let x_l = tape.add(a, b)?;

            let down = self.down(tape, store, n, y_l, grid)?;
            let a = tape.mul_scalar(down, d)?;
            let b = tape.mul_scalar(y_s, not_d)?;
            let x_s = tape.add(a, b)?;

            let a = tape.mul_scalar(y_l, d)?;
            let b = tape.mul_scalar(skip, not_d)?;
            skip = tape.add(a, b)?;

            let f_l = self.run_high(tape, store, n, x_l, cond, grid, ctx)?;
            let f_s = self.run_low(tape, store, n, x_s, cond, grid, ctx)?;
            let a = tape.mul_scalar(f_l, m)?;
            let b = tape.mul_scalar(y_l, not_m)?;
            y_l = tape.add(a, b)?;
            let a = tape.mul_scalar(f_s, not_m)?;
            let b = tape.mul_scalar(y_s, m)?;
            y_s = tape.add(a, b)?;

            if let Some(trace) = ctx.trace.as_deref_mut() {
                trace.push(GroupTrace {
                    m: tape.value(m).data()[0],
                    u: tape.value(u).data()[0],
                    d: tape.value(d).data()[0],
                    y_l: tape.value(y_l).clone(),
                    y_s: Some(tape.value(y_s).clone()),
                    skip: tape.value(skip).clone(),
                    ran_high: true,
                    ran_low: true,
                });
            }
            m_prev = m;
        }
        let last = gates[gates.len() - 1];
        let up = self.up(tape, store, gates.len() - 1, y_s, grid)?;
        let a = tape.mul_scalar(y_l, last)?;
        let not_last = tape.affine(last, -1.0, 1.0)?;
        let b = tape.mul_scalar(up, not_last)?;
        Ok(tape.add(a, b)?)
    }
}
