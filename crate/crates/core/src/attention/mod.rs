//! Attention variants on flattened `(t, h, w)` token grids and the
//! transformer blocks built from them.

mod block;
mod grid;
pub mod rope;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use block::{
    timestep_embedding, AdaLnParams, Block, BlockCtx, BlockShape, BlockTrace, CondConfig, CondEmbedder, Mixer, Resampler,
    SsaBlock, StreamSlot,
};
pub use grid::TokenGrid;
pub use rope::{rope3d, rope3d_table, DEFAULT_ROPE_BASE};

use crate::error::{Error, Result};
use crate::numerics::{Grid3, Op, RopeTable, Tensor};

/// Floor added to the linear-attention denominator.
pub const DENOM_EPS: f64 = 1e-6;
/// Epsilon of every LayerNorm in the blocks, QK-norm included.
pub const LN_EPS: f64 = 1e-6;

/// Kernel feature map `phi(x) = softplus(W x + b)`, applied per head.
/// `w` is `[heads, d_h, d_k]`, `b` is `[heads * d_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl KernelParams {
    pub fn heads(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn kernel_dim(&self) -> usize {
        self.w.shape()[2]
    }

    /// `W = I`, `b = 0` for a single head.
    pub fn identity(d: usize) -> Self {
        Self { w: Tensor::eye(d).reshape(&[1, d, d]).unwrap(), b: Tensor::zeros(&[d]) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LchaConfig {
    pub heads: usize,
    pub head_dim: usize,
    /// Kernel feature width `d_k`; defaults to `head_dim`.
    pub kernel_dim: Option<usize>,
    pub conv_kernel: [usize; 3],
    pub alpha_init: f64,
    pub qk_norm: bool,
    pub rope: bool,
}

impl Default for LchaConfig {
    fn default() -> Self {
        Self { heads: 1, head_dim: 128, kernel_dim: None, conv_kernel: [3, 3, 3], alpha_init: 0.0, qk_norm: true, rope: true }
    }
}

impl LchaConfig {
    pub fn kernel_dim(&self) -> usize {
        self.kernel_dim.unwrap_or(self.head_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 || self.kernel_dim() == 0 {
            return Err(Error::config("lcha", "heads, head_dim and kernel_dim must be positive"));
        }
        let [kt, kh, kw] = self.conv_kernel;
        if kt == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config("lcha.conv_kernel", format!("{:?} needs kt >= 1 and odd spatial taps", self.conv_kernel)));
        }
        if self.rope && !self.kernel_dim().is_multiple_of(2) {
            return Err(Error::config("lcha.kernel_dim", "rope needs an even kernel dimension"));
        }
        Ok(())
    }
}

/// Softmax attention mixer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FullConfig {
    pub heads: usize,
    pub head_dim: usize,
    pub qk_norm: bool,
    pub rope: bool,
}

impl Default for FullConfig {
    fn default() -> Self {
        Self { heads: 1, head_dim: 64, qk_norm: true, rope: true }
    }
}

impl FullConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::config("attention", "heads and head_dim must be positive"));
        }
        if self.rope && !self.head_dim.is_multiple_of(2) {
            return Err(Error::config("attention.head_dim", "rope needs an even head dimension"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsaConfig {
    pub stride: usize,
    /// Channel width on the strided grid; defaults to `stride^2 * C`.
    pub low_dim: Option<usize>,
    pub attn: FullConfig,
}

impl Default for SsaConfig {
    fn default() -> Self {
        Self { stride: 2, low_dim: None, attn: FullConfig::default() }
    }
}

impl SsaConfig {
    pub fn low_dim(&self, dim: usize) -> usize {
        self.low_dim.unwrap_or(self.stride * self.stride * dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::config("ssa.stride", "must be positive"));
        }
        if self.low_dim == Some(0) {
            return Err(Error::config("ssa.low_dim", "must be positive"));
        }
        self.attn.validate()
    }
}

/// Rope settings for [`linear_attention`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeSpec {
    pub grid: TokenGrid,
    pub frame_offset: usize,
    pub base: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearAttentionOptions {
    pub causal: bool,
    pub eps: f64,
    pub qk_norm: bool,
    pub rope: Option<RopeSpec>,
}

impl Default for LinearAttentionOptions {
    fn default() -> Self {
        Self { causal: false, eps: DENOM_EPS, qk_norm: false, rope: None }
    }
}

/// Single-head softmax attention `softmax(q k^T / sqrt(d)) v`.
pub fn full_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    if q.rows() == 0 || k.rows() == 0 {
        return Err(Error::config("attention", "empty sequence"));
    }
    Ok(Op::Attention { heads: 1, causal, prefix: None }.forward(&[q, k, v])?)
}

/// `softplus(x W + b)` per head; `x` is `[L, heads * d_h]`.
pub fn kernel_map(x: &Tensor, p: &KernelParams) -> Result<Tensor> {
    let z = Op::HeadLinear { heads: p.heads() }.forward(&[x, &p.w])?;
    let z = Op::AddRow.forward(&[&z, &p.b])?;
    Ok(Op::Softplus.forward(&[&z])?)
}

/// Kernelized attention in state form. `q`, `k` are `[L, heads * d_h]`, `v` is
/// `[L, heads * d_v]`; the kernel is shared between queries and keys.
pub fn linear_attention(q: &Tensor, k: &Tensor, v: &Tensor, p: &KernelParams, opts: &LinearAttentionOptions) -> Result<Tensor> {
    let heads = p.heads();
    let (q, k) = if opts.qk_norm {
        let ln = Op::HeadLayerNorm { heads, eps: LN_EPS };
        (ln.forward(&[q])?, ln.forward(&[k])?)
    } else {
        (q.clone(), k.clone())
    };
    let fq = kernel_map(&q, p)?;
    let fk = kernel_map(&k, p)?;
    let rope = match opts.rope {
        Some(r) => Some(Arc::new(rope3d_table(&r.grid, r.frame_offset, p.kernel_dim(), r.base)?)),
        None => None,
    };
    let op = Op::LinearAttention { heads, causal: opts.causal, eps: opts.eps, rope, prefix: None };
    Ok(op.forward(&[&fq, &fk, v])?)
}

/// Kernel features and values entering one linear-attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearInputs {
    /// `[L, heads * d_k]`
    pub fq: Tensor,
    pub fk: Tensor,
    /// `[L, heads * d_v]`
    pub v: Tensor,
    pub heads: usize,
    pub causal: bool,
    pub rope: Option<Arc<RopeTable>>,
}

impl LinearInputs {
    pub fn tokens(&self) -> usize {
        self.fq.rows()
    }

    /// Output of the op on these inputs, `[L, heads * d_v]`.
    pub fn output(&self) -> Result<Tensor> {
        let op = Op::LinearAttention { heads: self.heads, causal: self.causal, eps: DENOM_EPS, rope: self.rope.clone(), prefix: None };
        Ok(op.forward(&[&self.fq, &self.fk, &self.v])?)
    }
}

/// Implicit attention matrix of every head:
/// `A[i, j] = (R_i fq_i)^T (R_j fk_j) / (fq_i^T sum_j' fk_j' + eps)` over visible `j`,
/// so that `A v` is the op's output. Without rope every row sums to
/// `den / (den + eps)`.
pub fn linear_attention_maps(inp: &LinearInputs) -> Result<Vec<Tensor>> {
    let (l, heads) = (inp.tokens(), inp.heads);
    let ck = inp.fq.cols();
    if heads == 0 || !ck.is_multiple_of(heads) || inp.fk.shape() != inp.fq.shape() {
        return Err(Error::config("linear_inputs", format!("{:?} / {:?} with {heads} heads", inp.fq.shape(), inp.fk.shape())));
    }
    let dk = ck / heads;
    let rotate = |t: &Tensor| {
        let mut out = t.clone();
        if let Some(table) = &inp.rope {
            for (i, row) in out.data_mut().chunks_mut(ck).enumerate() {
                for h in 0..heads {
                    table.rotate(i, &mut row[h * dk..(h + 1) * dk], false);
                }
            }
        }
        out
    };
    let (rq, rk) = (rotate(&inp.fq), rotate(&inp.fk));
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let mut a = vec![0.0; l * l];
        for i in 0..l {
            let visible = if inp.causal { i + 1 } else { l };
            let q = &inp.fq.row(i)[cols.clone()];
            let mut den = 0.0;
            for j in 0..visible {
                den += q.iter().zip(&inp.fk.row(j)[cols.clone()]).map(|(a, b)| a * b).sum::<f64>();
            }
            let den = den + DENOM_EPS;
            let rqi = &rq.row(i)[cols.clone()];
            for j in 0..visible {
                a[i * l + j] = rqi.iter().zip(&rk.row(j)[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() / den;
            }
        }
        maps.push(Tensor::new(vec![l, l], a)?);
    }
    Ok(maps)
}

/// Depthwise causal conv followed by channel mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    /// `[kt, kh, kw, C]`
    pub depthwise: Tensor,
    pub depthwise_bias: Tensor,
    /// `[C, C]`
    pub mix: Tensor,
    pub mix_bias: Tensor,
}

impl ConvWeights {
    pub fn kernel(&self) -> (usize, usize, usize) {
        let s = self.depthwise.shape();
        (s[0], s[1], s[2])
    }
}

/// `x: [T*H*W, C]` on `grid`. `history` holds the `kt - 1` frames before the
/// input; without it the temporal axis is left-padded with zeros.
pub fn local_conv_path(x: &Tensor, grid: &TokenGrid, weights: &ConvWeights, history: Option<&Tensor>) -> Result<Tensor> {
    let op = Op::DepthwiseConv3d { grid: grid.grid3(), kernel: weights.kernel(), history: history.map(|h| Arc::new(h.clone())) };
    let h = op.forward(&[x, &weights.depthwise, &weights.depthwise_bias])?;
    let h = Op::Matmul.forward(&[&h, &weights.mix])?;
    Ok(Op::AddRow.forward(&[&h, &weights.mix_bias])?)
}

/// Ablation baseline: keys and values average-pooled over `stride x stride`
/// spatial windows, queries at full length. Single head, non-causal.
pub fn kv_compress_attention(q: &Tensor, k: &Tensor, v: &Tensor, grid: &TokenGrid, stride: usize) -> Result<Tensor> {
    grid.downsampled(stride)?;
    let g: Grid3 = grid.grid3();
    let pool = Op::SpatialAvgPool { grid: g, stride };
    let (kp, vp) = if stride == 1 { (k.clone(), v.clone()) } else { (pool.forward(&[k])?, pool.forward(&[v])?) };
    full_attention(q, &kp, &vp, false)
}
