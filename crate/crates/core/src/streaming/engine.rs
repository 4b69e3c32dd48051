use serde::{Deserialize, Serialize};

use super::BlockCache;
use crate::attention::TokenGrid;
use crate::error::{Error, Result};
use crate::numerics::{NumericsError, ParamStore, Tape, Tensor};
use crate::sandwich::{ForwardCtx, HighMixer, ModelCache, ModelConfig, Routing, SandwichLayout, SandwichModel};

const F64_BYTES: usize = std::mem::size_of::<f64>();

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChunkPlan {
    /// Latent frames generated per chunk.
    pub frames_per_chunk: usize,
    /// Denoising steps per chunk.
    pub steps: usize,
    pub height: usize,
    pub width: usize,
    pub chunks: usize,
}

impl Default for ChunkPlan {
    fn default() -> Self {
        Self { frames_per_chunk: 3, steps: 4, height: 4, width: 4, chunks: 4 }
    }
}

impl ChunkPlan {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("frames_per_chunk", self.frames_per_chunk), ("steps", self.steps), ("height", self.height), ("width", self.width)] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    /// Grid of one chunk with `channels` per token.
    pub fn chunk_grid(&self, channels: usize) -> TokenGrid {
        TokenGrid::new(self.frames_per_chunk, self.height, self.width, channels)
    }

    pub fn tokens_per_chunk(&self) -> usize {
        self.frames_per_chunk * self.height * self.width
    }

    /// Uniform grid `1, 1 - 1/N, ..., 0`.
    pub fn schedule(&self) -> Vec<f64> {
        uniform_schedule(self.steps)
    }
}

pub fn uniform_schedule(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| if i == steps { 0.0 } else { 1.0 - i as f64 / steps as f64 }).collect()
}

fn check_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.len() < 2 || schedule.last() != Some(&0.0) || schedule[0] > 1.0 || schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config("t_schedule", format!("{schedule:?} must decrease strictly from at most 1 to 0")));
    }
    Ok(())
}

fn check_finite(x: &Tensor, op: &str, chunk: usize) -> Result<()> {
    match x.data().iter().find(|v| !v.is_finite()) {
        Some(&value) => Err(Error::Numerics(NumericsError::NonFinite { op: op.into(), index: chunk, value })),
        None => Ok(()),
    }
}

/// Byte counts of one engine's caches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheBytes {
    pub lin_attn: usize,
    pub conv_ring: usize,
    /// Key/value windows of the strided attention blocks.
    pub ssa_kv: usize,
    /// Key/value caches of full-resolution attention blocks (teacher models only).
    pub high_kv: usize,
}

impl CacheBytes {
    /// Bytes that do not depend on the number of generated frames.
    pub fn fixed(&self) -> usize {
        self.lin_attn + self.conv_ring
    }

    pub fn total(&self) -> usize {
        self.lin_attn + self.conv_ring + self.ssa_kv + self.high_kv
    }
}

/// Chunked autoregressive generator over a hard layout.
///
/// Every chunk is denoised with the caches read-only; the clean chunk is then
/// run once more at `t = 0` to write its states into the caches.
pub struct StreamEngine {
    model: SandwichModel,
    store: ParamStore,
    mask: Vec<u8>,
    plan: ChunkPlan,
    window: Option<usize>,
    cache: ModelCache,
    frames_done: usize,
    chunks_done: usize,
}

impl StreamEngine {
    /// `window` is the strided-attention KV window in chunks; `None` keeps everything.
    pub fn new(model: SandwichModel, store: ParamStore, layout: &SandwichLayout, plan: ChunkPlan, window: Option<usize>) -> Result<Self> {
        layout.validate()?;
        plan.validate()?;
        if &layout.model != model.config() {
            return Err(Error::StateMismatch("layout was built for a different model config".into()));
        }
        if !model.config().causal {
            return Err(Error::StateMismatch("streaming needs a causal model".into()));
        }
        if window == Some(0) {
            return Err(Error::config("window", "must be at least 1 chunk"));
        }
        let cache = model.new_cache(&layout.mask, &plan.chunk_grid(model.config().in_channels), window)?;
        Ok(Self { model, store, mask: layout.mask.clone(), plan, window, cache, frames_done: 0, chunks_done: 0 })
    }

    pub fn model(&self) -> &SandwichModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    pub fn plan(&self) -> &ChunkPlan {
        &self.plan
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    pub fn cache(&self) -> &ModelCache {
        &self.cache
    }

    pub fn frames_done(&self) -> usize {
        self.frames_done
    }

    pub fn chunks_done(&self) -> usize {
        self.chunks_done
    }

    fn velocity(&mut self, x: &Tensor, t: f64, text: &Tensor, commit: bool) -> Result<Tensor> {
        let grid = self.plan.chunk_grid(self.model.config().in_channels);
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let mut ctx = ForwardCtx { frame_offset: self.frames_done, stream: Some(&mut self.cache), commit, trace: None };
        let ts = vec![t; grid.frames];
        let y = self.model.forward(&mut tape, &self.store, xv, &grid, &ts, text, Routing::Hard(&self.mask), &mut ctx)?;
        Ok(tape.value(y).clone())
    }

    /// Denoises one chunk of noise `[tokens_per_chunk, in_channels]` with the plan's uniform schedule.
    pub fn step(&mut self, noise: &Tensor, text: &Tensor) -> Result<Tensor> {
        let schedule = self.plan.schedule();
        self.step_with(noise, &schedule, text)
    }

    /// Denoises one chunk along `schedule` (`t_0 > ... > t_N = 0`) and commits it.
    pub fn step_with(&mut self, noise: &Tensor, schedule: &[f64], text: &Tensor) -> Result<Tensor> {
        check_schedule(schedule)?;
        let want = [self.plan.tokens_per_chunk(), self.model.config().in_channels];
        if noise.shape() != want {
            return Err(Error::config("noise", format!("chunk noise {:?}, expected {want:?}", noise.shape())));
        }
        let mut x = noise.clone();
        for w in schedule.windows(2) {
            let v = self.velocity(&x, w[0], text, false)?;
            let dt = w[0] - w[1];
            x = x.zip_map(&v, |a, b| a - dt * b)?;
            check_finite(&x, "stream_step", self.chunks_done)?;
        }
        self.velocity(&x, 0.0, text, true)?;
        self.frames_done += self.plan.frames_per_chunk;
        self.chunks_done += 1;
        Ok(x)
    }

    /// Clears every cache; the next chunk starts a fresh stream.
    pub fn reset(&mut self) {
        self.cache.reset();
        self.frames_done = 0;
        self.chunks_done = 0;
    }

    /// Measured bytes held by the caches right now.
    pub fn cache_bytes(&self) -> CacheBytes {
        let mut out = CacheBytes::default();
        for (g, &m) in self.cache.groups.iter().zip(&self.cache.mask) {
            for c in g.high.iter().chain(g.low.iter()).flatten() {
                match c {
                    BlockCache::Lcha { lin, ring } => {
                        out.lin_attn += lin.bytes();
                        out.conv_ring += ring.bytes();
                    }
                    BlockCache::Attention { kv } if m == 1 => out.high_kv += kv.bytes(),
                    BlockCache::Attention { kv } => out.ssa_kv += kv.bytes(),
                }
            }
        }
        out
    }

    /// Tokens held by each key/value cache, in block order.
    pub fn kv_tokens(&self) -> Vec<usize> {
        self.cache
            .caches()
            .filter_map(|c| match c {
                BlockCache::Attention { kv } => Some(kv.tokens()),
                _ => None,
            })
            .collect()
    }

    /// Tokens absorbed by each linear-attention state, in block order.
    pub fn lin_tokens(&self) -> Vec<usize> {
        self.cache
            .caches()
            .filter_map(|c| match c {
                BlockCache::Lcha { lin, .. } => Some(lin.tokens()),
                _ => None,
            })
            .collect()
    }
}

/// Offline reference for chunked generation: every denoising step of chunk
/// `c` is one causal forward over the clean chunks `0..c` at `t = 0` followed
/// by the current chunk at `t_i`.
pub fn offline_generate(model: &SandwichModel, store: &ParamStore, mask: &[u8], plan: &ChunkPlan, noises: &[Tensor], text: &Tensor) -> Result<Vec<Tensor>> {
    plan.validate()?;
    let schedule = plan.schedule();
    let c = model.config().in_channels;
    let f = plan.frames_per_chunk;
    let per_chunk = plan.tokens_per_chunk();
    let mut clean: Vec<Tensor> = Vec::with_capacity(noises.len());
    for (n, noise) in noises.iter().enumerate() {
        let grid = TokenGrid::new((n + 1) * f, plan.height, plan.width, c);
        let mut x = noise.clone();
        for w in schedule.windows(2) {
            let mut parts: Vec<&Tensor> = clean.iter().collect();
            parts.push(&x);
            let full = Tensor::concat_rows(&parts)?;
            let mut ts = vec![0.0; n * f];
            ts.extend(std::iter::repeat_n(w[0], f));
            let mut tape = Tape::inference();
            let xv = tape.constant(full);
            let y = model.forward(&mut tape, store, xv, &grid, &ts, text, Routing::Hard(mask), &mut ForwardCtx::default())?;
            let y = tape.value(y);
            let v = Tensor::new(vec![per_chunk, c], y.data()[n * per_chunk * c..].to_vec())?;
            let dt = w[0] - w[1];
            x = x.zip_map(&v, |a, b| a - dt * b)?;
        }
        clean.push(x);
    }
    Ok(clean)
}

/// Analytic cache sizes of `layout` after `plan.chunks` chunks with KV window `window`.
pub fn cache_footprint(layout: &SandwichLayout, plan: &ChunkPlan, window: Option<usize>) -> Result<CacheBytes> {
    layout.validate()?;
    plan.validate()?;
    let cfg: &ModelConfig = &layout.model;
    let s = cfg.ssa.stride;
    let tpf = plan.height * plan.width;
    let kept = window.map_or(plan.chunks, |w| w.min(plan.chunks));
    let ssa_tokens = plan.frames_per_chunk * tpf / (s * s);
    let attn_width = cfg.ssa.attn.heads * cfg.ssa.attn.head_dim;
    let mut out = CacheBytes::default();
    for &m in &layout.mask {
        for _ in 0..cfg.group_size {
            if m == 0 {
                out.ssa_kv += 2 * ssa_tokens * attn_width * kept * F64_BYTES;
            } else if cfg.high_mixer == HighMixer::Full {
                out.high_kv += 2 * plan.tokens_per_chunk() * attn_width * plan.chunks * F64_BYTES;
            } else {
                let l = &cfg.lcha;
                out.lin_attn += l.heads * (l.kernel_dim() * l.head_dim + l.kernel_dim()) * F64_BYTES;
                out.conv_ring += (l.conv_kernel[0] - 1) * tpf * cfg.dim * F64_BYTES;
            }
        }
    }
    Ok(out)
}

/// Component latencies of one device, in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyInputs {
    pub text_encoder_ms: f64,
    pub dit_step_ms: f64,
    pub decoder_ms: f64,
    pub steps: usize,
    /// Decoded pixel frames per chunk.
    pub frames_per_chunk: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub chunk_ms: f64,
    pub fps: f64,
}

impl LatencyReport {
    /// FPS rounded to one decimal.
    pub fn fps_1dp(&self) -> f64 {
        (self.fps * 10.0).round() / 10.0
    }
}

/// `chunk_ms = text + steps * dit + decoder`, `fps = frames / (chunk_ms / 1000)`.
pub fn latency_model(p: &LatencyInputs) -> Result<LatencyReport> {
    if p.text_encoder_ms < 0.0 || p.decoder_ms < 0.0 || !(p.dit_step_ms > 0.0) || p.steps == 0 || p.frames_per_chunk == 0 {
        return Err(Error::config("latency", format!("non-positive component in {p:?}")));
    }
    let chunk_ms = p.text_encoder_ms + p.steps as f64 * p.dit_step_ms + p.decoder_ms;
    Ok(LatencyReport { chunk_ms, fps: p.frames_per_chunk as f64 / (chunk_ms / 1000.0) })
}
