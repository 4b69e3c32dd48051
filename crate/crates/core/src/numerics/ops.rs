//! Op catalog. Every op is a pure forward function plus a vector-Jacobian
//! product that consumes the forward inputs and output.

use std::sync::Arc;

use super::{DType, NumericsError, Tensor};

/// Per-token rotation table shared by every head: `pairs` angle pairs per token,
/// channel pair `p` is `(2p, 2p + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    pub tokens: usize,
    pub pairs: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RopeTable {
    pub fn identity(tokens: usize, pairs: usize) -> Self {
        Self { tokens, pairs, cos: vec![1.0; tokens * pairs], sin: vec![0.0; tokens * pairs] }
    }

    /// Rotates one token's channel slice in place; `inverse` applies the transpose.
    #[inline]
    pub fn rotate(&self, token: usize, x: &mut [f64], inverse: bool) {
        let base = token * self.pairs;
        for p in 0..self.pairs {
            let (c, s) = (self.cos[base + p], if inverse { -self.sin[base + p] } else { self.sin[base + p] });
            let (a, b) = (x[2 * p], x[2 * p + 1]);
            x[2 * p] = c * a - s * b;
            x[2 * p + 1] = s * a + c * b;
        }
    }
}

/// Accumulated linear-attention history for every head: `s` is `heads x dk x dv`
/// (sum of rotated key features times values), `z` is `heads x dk` (sum of key features).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPrefix {
    pub heads: usize,
    pub dk: usize,
    pub dv: usize,
    pub s: Vec<f64>,
    pub z: Vec<f64>,
}

impl LinearPrefix {
    pub fn zeros(heads: usize, dk: usize, dv: usize) -> Self {
        Self { heads, dk, dv, s: vec![0.0; heads * dk * dv], z: vec![0.0; heads * dk] }
    }
}

/// Keys and values of earlier tokens visible to every query (`[P, heads*d]`).
#[derive(Clone, Debug, PartialEq)]
pub struct KvPrefix {
    pub keys: Tensor,
    pub values: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid3 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Grid3 {
    pub fn tokens(&self) -> usize {
        self.t * self.h * self.w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Matmul,
    Add,
    Sub,
    Mul,
    /// `scale * x + shift`
    Affine { scale: f64, shift: f64 },
    /// `x * s` with `s` of shape `[1]`
    MulScalar,
    /// `x + v` with `v` broadcast over rows
    AddRow,
    /// `x * v` with `v` broadcast over rows
    MulRow,
    Softmax,
    Sigmoid,
    Softplus,
    Silu,
    Relu,
    LayerNorm { eps: f64 },
    /// LayerNorm without affine, applied independently to each of `heads` channel slices.
    HeadLayerNorm { heads: usize, eps: f64 },
    MeanSquare,
    Reshape { shape: Vec<usize> },
    Transpose,
    /// Block-diagonal projection: `x[L, H*din] . w[H, din, dout]`.
    HeadLinear { heads: usize },
    SliceCols { start: usize, len: usize },
    /// Repeats each row `times` times.
    ExpandRows { times: usize },
    Rope { table: Arc<RopeTable> },
    LinearAttention {
        heads: usize,
        causal: bool,
        eps: f64,
        rope: Option<Arc<RopeTable>>,
        prefix: Option<Arc<LinearPrefix>>,
    },
    Attention { heads: usize, causal: bool, prefix: Option<Arc<KvPrefix>> },
    /// Depthwise 3-D convolution, temporally causal, spatially same-padded.
    /// `history` supplies the `kt - 1` frames preceding the input (zeros when absent).
    DepthwiseConv3d { grid: Grid3, kernel: (usize, usize, usize), history: Option<Arc<Tensor>> },
    SpaceToChannel { grid: Grid3, stride: usize },
    ChannelToSpace { grid: Grid3, stride: usize },
    SpatialAvgPool { grid: Grid3, stride: usize },
    OneHotArgmax,
    /// Forward: one-hot argmax of each row. Backward: identity.
    StraightThrough,
}

macro_rules! arity {
    ($name:expr, $inputs:expr, $n:expr) => {
        if $inputs.len() != $n {
            return Err(NumericsError::Arity { op: $name, expected: $n, got: $inputs.len() });
        }
    };
}

fn out_dtype(inputs: &[&Tensor]) -> DType {
    inputs.iter().fold(DType::F32, |d, t| d.promote(t.dtype()))
}

fn require(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<(), NumericsError> {
    if cond {
        Ok(())
    } else {
        Err(NumericsError::shape(op, detail()))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Overflow-safe `ln(1 + e^x)`, floored at the smallest positive normal of `dtype`.
#[inline]
pub fn softplus_scalar(x: f64, dtype: DType) -> f64 {
    let v = if x > 20.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
    let floor = match dtype {
        DType::F32 => f32::MIN_POSITIVE as f64,
        DType::F64 => f64::MIN_POSITIVE,
    };
    v.max(floor)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize), NumericsError> {
    require(t.rank() == 2, op, || format!("expected rank 2, got {:?}", t.shape()))?;
    Ok((t.shape()[0], t.shape()[1]))
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Matmul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Affine { .. } => "affine",
            Op::MulScalar => "mul_scalar",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::Softmax => "softmax",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Silu => "silu",
            Op::Relu => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::HeadLayerNorm { .. } => "head_layer_norm",
            Op::MeanSquare => "mean_square",
            Op::Reshape { .. } => "reshape",
            Op::Transpose => "transpose",
            Op::HeadLinear { .. } => "head_linear",
            Op::SliceCols { .. } => "slice_cols",
            Op::ExpandRows { .. } => "expand_rows",
            Op::Rope { .. } => "rope",
            Op::LinearAttention { .. } => "linear_attention",
            Op::Attention { .. } => "attention",
            Op::DepthwiseConv3d { .. } => "depthwise_conv3d",
            Op::SpaceToChannel { .. } => "space_to_channel",
            Op::ChannelToSpace { .. } => "channel_to_space",
            Op::SpatialAvgPool { .. } => "spatial_avg_pool",
            Op::OneHotArgmax => "one_hot_argmax",
            Op::StraightThrough => "straight_through",
        }
    }

    pub fn has_vjp(&self) -> bool {
        !matches!(self, Op::OneHotArgmax)
    }

    /// Forward pass; the result is checked for non-finite values.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError> {
        let out = self.forward_unchecked(inputs)?;
        out.check_finite(self.name())
    }

    fn forward_unchecked(&self, inputs: &[&Tensor]) -> Result<Tensor, NumericsError> {
        let name = self.name();
        let dtype = out_dtype(inputs);
        match self {
            Op::Matmul => {
                arity!(name, inputs, 2);
                let (m, k) = as_matrix(inputs[0], name)?;
                let (k2, n) = as_matrix(inputs[1], name)?;
                require(k == k2, name, || format!("inner dims {k} vs {k2}"))?;
                Ok(Tensor::from_parts(vec![m, n], dtype, matmul_raw(inputs[0].data(), inputs[1].data(), m, k, n)))
            }
            Op::Add | Op::Sub | Op::Mul => {
                arity!(name, inputs, 2);
                let (a, b) = (inputs[0], inputs[1]);
                require(a.shape() == b.shape(), name, || format!("{:?} vs {:?}", a.shape(), b.shape()))?;
                let f: fn(f64, f64) -> f64 = match self {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                a.zip_map(b, f)
            }
            Op::Affine { scale, shift } => {
                arity!(name, inputs, 1);
                Ok(inputs[0].map(|x| scale * x + shift))
            }
            Op::MulScalar => {
                arity!(name, inputs, 2);
                require(inputs[1].numel() == 1, name, || format!("scalar operand has shape {:?}", inputs[1].shape()))?;
                let s = inputs[1].data()[0];
                Ok(Tensor::from_parts(inputs[0].shape().to_vec(), dtype, inputs[0].data().iter().map(|x| x * s).collect()))
            }
            Op::AddRow | Op::MulRow => {
                arity!(name, inputs, 2);
                let (x, v) = (inputs[0], inputs[1]);
                let c = x.cols();
                require(v.numel() == c, name, || format!("row vector {:?} vs cols {c}", v.shape()))?;
                let vd = v.data();
                let add = matches!(self, Op::AddRow);
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| if add { a + vd[i % c] } else { a * vd[i % c] })
                    .collect();
                Ok(Tensor::from_parts(x.shape().to_vec(), dtype, data))
            }
            Op::Softmax => {
                arity!(name, inputs, 1);
                let x = inputs[0];
                let c = x.cols();
                let mut data = x.data().to_vec();
                for row in data.chunks_mut(c) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        s += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= s;
                    }
                }
                Ok(Tensor::from_parts(x.shape().to_vec(), dtype, data))
            }
            Op::Sigmoid => {
                arity!(name, inputs, 1);
                Ok(inputs[0].map(sigmoid))
            }
            Op::Softplus => {
                arity!(name, inputs, 1);
                Ok(inputs[0].map(|x| softplus_scalar(x, dtype)))
            }
            Op::Silu => {
                arity!(name, inputs, 1);
                Ok(inputs[0].map(|x| x * sigmoid(x)))
            }
            Op::Relu => {
                arity!(name, inputs, 1);
                Ok(inputs[0].map(|x| x.max(0.0)))
            }
            Op::LayerNorm { eps } => {
                arity!(name, inputs, 3);
                let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
                let c = x.cols();
                require(gamma.numel() == c && beta.numel() == c, name, || {
                    format!("affine params {:?}/{:?} vs C={c}", gamma.shape(), beta.shape())
                })?;
                let (g, b) = (gamma.data(), beta.data());
                let mut data = layer_norm_rows(x.data(), c, *eps);
                for row in data.chunks_mut(c) {
                    for j in 0..c {
                        row[j] = row[j] * g[j] + b[j];
                    }
                }
                Ok(Tensor::from_parts(x.shape().to_vec(), dtype, data))
            }
            Op::HeadLayerNorm { heads, eps } => {
                arity!(name, inputs, 1);
                let x = inputs[0];
                require(*heads > 0 && x.cols().is_multiple_of(*heads), name, || format!("{} cols, {heads} heads", x.cols()))?;
                let d = x.cols() / heads;
                Ok(Tensor::from_parts(x.shape().to_vec(), dtype, layer_norm_rows(x.data(), d, *eps)))
            }
            Op::MeanSquare => {
                arity!(name, inputs, 1);
                let x = inputs[0];
                let ms = x.data().iter().map(|v| v * v).sum::<f64>() / x.numel() as f64;
                Ok(Tensor::from_parts(vec![1], dtype, vec![ms]))
            }
            Op::Reshape { shape } => {
                arity!(name, inputs, 1);
                let t = inputs[0].reshape(shape)?;
                Ok(Tensor::from_parts(shape.clone(), dtype, t.into_data()))
            }
            Op::Transpose => {
                arity!(name, inputs, 1);
                let (r, c) = as_matrix(inputs[0], name)?;
                Ok(Tensor::from_parts(vec![c, r], dtype, transpose_raw(inputs[0].data(), r, c)))
            }
            Op::HeadLinear { heads } => {
                arity!(name, inputs, 2);
                let (x, w) = (inputs[0], inputs[1]);
                let (l, cin) = as_matrix(x, name)?;
                require(w.rank() == 3 && w.shape()[0] == *heads && w.shape()[1] * heads == cin, name, || {
                    format!("x {:?} vs w {:?} with {heads} heads", x.shape(), w.shape())
                })?;
                let (din, dout) = (w.shape()[1], w.shape()[2]);
                let mut out = vec![0.0; l * heads * dout];
                for h in 0..*heads {
                    let wh = &w.data()[h * din * dout..(h + 1) * din * dout];
                    for r in 0..l {
                        let xr = &x.data()[r * cin + h * din..r * cin + (h + 1) * din];
                        let orow = &mut out[r * heads * dout + h * dout..r * heads * dout + (h + 1) * dout];
                        for (i, &xv) in xr.iter().enumerate() {
                            for (o, &wv) in orow.iter_mut().zip(&wh[i * dout..(i + 1) * dout]) {
                                *o += xv * wv;
                            }
                        }
                    }
                }
                Ok(Tensor::from_parts(vec![l, heads * dout], dtype, out))
            }
            Op::SliceCols { start, len } => {
                arity!(name, inputs, 1);
                let x = inputs[0];
                let c = x.cols();
                require(*len > 0 && start + len <= c, name, || format!("[{start}, {}) of {c}", start + len))?;
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = *len;
                let data = x.data().chunks(c).flat_map(|r| r[*start..start + len].iter().copied()).collect();
                Ok(Tensor::from_parts(shape, dtype, data))
            }
            Op::ExpandRows { times } => {
                arity!(name, inputs, 1);
                let (r, c) = as_matrix(inputs[0], name)?;
                require(*times > 0, name, || "zero repeat".into())?;
                let mut data = Vec::with_capacity(r * times * c);
                for row in inputs[0].data().chunks(c) {
                    for _ in 0..*times {
                        data.extend_from_slice(row);
                    }
                }
                Ok(Tensor::from_parts(vec![r * times, c], dtype, data))
            }
            Op::Rope { table } => {
                arity!(name, inputs, 1);
                rope_apply(inputs[0], table, false, name)
            }
            Op::LinearAttention { heads, causal, eps, rope, prefix } => {
                arity!(name, inputs, 3);
                let (y, _) = linear_attention_forward(
                    inputs[0],
                    inputs[1],
                    inputs[2],
                    *heads,
                    *causal,
                    *eps,
                    rope.as_deref(),
                    prefix.as_deref(),
                )?;
                Ok(y)
            }
            Op::Attention { heads, causal, prefix } => {
                arity!(name, inputs, 3);
                let (y, _) = attention_forward(inputs[0], inputs[1], inputs[2], *heads, *causal, prefix.as_deref())?;
                Ok(y)
            }
            Op::DepthwiseConv3d { grid, kernel, history } => {
                arity!(name, inputs, 3);
                conv3d_forward(inputs[0], inputs[1], inputs[2], *grid, *kernel, history.as_deref())
            }
            Op::SpaceToChannel { grid, stride } => {
                arity!(name, inputs, 1);
                space_to_channel(inputs[0], *grid, *stride, false)
            }
            Op::ChannelToSpace { grid, stride } => {
                arity!(name, inputs, 1);
                space_to_channel(inputs[0], *grid, *stride, true)
            }
            Op::SpatialAvgPool { grid, stride } => {
                arity!(name, inputs, 1);
                avg_pool(inputs[0], *grid, *stride)
            }
            Op::OneHotArgmax | Op::StraightThrough => {
                arity!(name, inputs, 1);
                let x = inputs[0];
                let c = x.cols();
                let mut data = vec![0.0; x.numel()];
                for (r, row) in x.data().chunks(c).enumerate() {
                    let mut best = 0;
                    for j in 1..c {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    data[r * c + best] = 1.0;
                }
                Ok(Tensor::from_parts(x.shape().to_vec(), dtype, data))
            }
        }
    }

    /// Vector-Jacobian product: given the forward inputs, the forward output and the
    /// cotangent `g` of the output, returns one cotangent per input.
    pub fn vjp(&self, inputs: &[&Tensor], output: &Tensor, g: &Tensor) -> Result<Vec<Tensor>, NumericsError> {
        let name = self.name();
        if g.shape() != output.shape() {
            return Err(NumericsError::shape(name, format!("cotangent {:?} vs output {:?}", g.shape(), output.shape())));
        }
        let grads = match self {
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let bt = transpose_raw(b.data(), k, n);
                let at = transpose_raw(a.data(), m, k);
                vec![
                    Tensor::from_parts(vec![m, k], DType::F64, matmul_raw(g.data(), &bt, m, n, k)),
                    Tensor::from_parts(vec![k, n], DType::F64, matmul_raw(&at, g.data(), k, m, n)),
                ]
            }
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.map(|v| -v)],
            Op::Mul => vec![g.zip_map(inputs[1], |a, b| a * b)?, g.zip_map(inputs[0], |a, b| a * b)?],
            Op::Affine { scale, .. } => vec![g.map(|v| v * scale)],
            Op::MulScalar => {
                let s = inputs[1].data()[0];
                vec![g.map(|v| v * s), Tensor::scalar(g.dot(inputs[0])).reshape(inputs[1].shape())?]
            }
            Op::AddRow | Op::MulRow => {
                let (x, v) = (inputs[0], inputs[1]);
                let c = x.cols();
                let mut gv = vec![0.0; c];
                let gx = if matches!(self, Op::AddRow) {
                    for (i, &gi) in g.data().iter().enumerate() {
                        gv[i % c] += gi;
                    }
                    g.clone()
                } else {
                    let vd = v.data();
                    for (i, (&gi, &xi)) in g.data().iter().zip(x.data()).enumerate() {
                        gv[i % c] += gi * xi;
                    }
                    Tensor::from_parts(
                        x.shape().to_vec(),
                        DType::F64,
                        g.data().iter().enumerate().map(|(i, &gi)| gi * vd[i % c]).collect(),
                    )
                };
                vec![gx, Tensor::from_parts(v.shape().to_vec(), DType::F64, gv)]
            }
            Op::Softmax => {
                let c = output.cols();
                let mut gx = vec![0.0; output.numel()];
                for ((yr, gr), out) in output.data().chunks(c).zip(g.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Tensor::from_parts(output.shape().to_vec(), DType::F64, gx)]
            }
            Op::Sigmoid => vec![g.zip_map(output, |g, y| g * y * (1.0 - y))?],
            Op::Softplus => vec![g.zip_map(inputs[0], |g, x| g * sigmoid(x))?],
            Op::Silu => vec![g.zip_map(inputs[0], |g, x| {
                let s = sigmoid(x);
                g * (s + x * s * (1.0 - s))
            })?],
            Op::Relu => vec![g.zip_map(inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })?],
            Op::LayerNorm { eps } => {
                let (x, gamma) = (inputs[0], inputs[1]);
                let c = x.cols();
                let xhat = layer_norm_rows(x.data(), c, *eps);
                let gd = gamma.data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut gxhat = vec![0.0; x.numel()];
                for i in 0..x.numel() {
                    let j = i % c;
                    ggamma[j] += g.data()[i] * xhat[i];
                    gbeta[j] += g.data()[i];
                    gxhat[i] = g.data()[i] * gd[j];
                }
                let gx = layer_norm_backward(x.data(), &xhat, &gxhat, c, *eps);
                vec![
                    Tensor::from_parts(x.shape().to_vec(), DType::F64, gx),
                    Tensor::from_parts(gamma.shape().to_vec(), DType::F64, ggamma),
                    Tensor::from_parts(inputs[2].shape().to_vec(), DType::F64, gbeta),
                ]
            }
            Op::HeadLayerNorm { heads, eps } => {
                let x = inputs[0];
                let d = x.cols() / heads;
                let xhat = layer_norm_rows(x.data(), d, *eps);
                vec![Tensor::from_parts(
                    x.shape().to_vec(),
                    DType::F64,
                    layer_norm_backward(x.data(), &xhat, g.data(), d, *eps),
                )]
            }
            Op::MeanSquare => {
                let x = inputs[0];
                let k = 2.0 * g.data()[0] / x.numel() as f64;
                vec![x.map(|v| k * v).to_dtype(DType::F64)]
            }
            Op::Reshape { .. } => vec![g.reshape(inputs[0].shape())?],
            Op::Transpose => {
                let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
                vec![Tensor::from_parts(vec![r, c], DType::F64, transpose_raw(g.data(), c, r))]
            }
            Op::HeadLinear { heads } => {
                let (x, w) = (inputs[0], inputs[1]);
                let (l, cin) = (x.shape()[0], x.shape()[1]);
                let (din, dout) = (w.shape()[1], w.shape()[2]);
                let mut gx = vec![0.0; x.numel()];
                let mut gw = vec![0.0; w.numel()];
                for h in 0..*heads {
                    for r in 0..l {
                        let grow = &g.data()[r * heads * dout + h * dout..r * heads * dout + (h + 1) * dout];
                        for i in 0..din {
                            let xi = x.data()[r * cin + h * din + i];
                            let wrow = &w.data()[h * din * dout + i * dout..h * din * dout + (i + 1) * dout];
                            let gwrow = &mut gw[h * din * dout + i * dout..h * din * dout + (i + 1) * dout];
                            let mut acc = 0.0;
                            for o in 0..dout {
                                acc += grow[o] * wrow[o];
                                gwrow[o] += xi * grow[o];
                            }
                            gx[r * cin + h * din + i] = acc;
                        }
                    }
                }
                vec![
                    Tensor::from_parts(x.shape().to_vec(), DType::F64, gx),
                    Tensor::from_parts(w.shape().to_vec(), DType::F64, gw),
                ]
            }
            Op::SliceCols { start, len } => {
                let x = inputs[0];
                let c = x.cols();
                let mut gx = vec![0.0; x.numel()];
                for (r, grow) in g.data().chunks(*len).enumerate() {
                    gx[r * c + start..r * c + start + len].copy_from_slice(grow);
                }
                vec![Tensor::from_parts(x.shape().to_vec(), DType::F64, gx)]
            }
            Op::ExpandRows { times } => {
                let x = inputs[0];
                let c = x.cols();
                let mut gx = vec![0.0; x.numel()];
                for (r, grow) in g.data().chunks(c).enumerate() {
                    let src = r / times;
                    for j in 0..c {
                        gx[src * c + j] += grow[j];
                    }
                }
                vec![Tensor::from_parts(x.shape().to_vec(), DType::F64, gx)]
            }
            Op::Rope { table } => vec![rope_apply(g, table, true, name)?],
            Op::LinearAttention { heads, causal, eps, rope, prefix } => linear_attention_vjp(
                inputs[0],
                inputs[1],
                inputs[2],
                g,
                *heads,
                *causal,
                *eps,
                rope.as_deref(),
                prefix.as_deref(),
            )?,
            Op::Attention { heads, causal, prefix } => {
                attention_vjp(inputs[0], inputs[1], inputs[2], g, *heads, *causal, prefix.as_deref())?
            }
            Op::DepthwiseConv3d { grid, kernel, history } => {
                conv3d_vjp(inputs[0], inputs[1], g, *grid, *kernel, history.as_deref())
            }
            Op::SpaceToChannel { grid, stride } => {
                let low = Grid3 { t: grid.t, h: grid.h / stride, w: grid.w / stride };
                vec![space_to_channel(g, low, *stride, true)?]
            }
            Op::ChannelToSpace { grid, stride } => {
                let high = Grid3 { t: grid.t, h: grid.h * stride, w: grid.w * stride };
                vec![space_to_channel(g, high, *stride, false)?]
            }
            Op::SpatialAvgPool { grid, stride } => vec![avg_pool_vjp(g, *grid, *stride, inputs[0].cols())],
            Op::StraightThrough => vec![g.clone()],
            Op::OneHotArgmax => return Err(NumericsError::MissingVjp(name.to_string())),
        };
        Ok(grads.into_iter().map(|t| t.to_dtype(DType::F64)).collect())
    }
}

fn layer_norm_rows(x: &[f64], c: usize, eps: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn layer_norm_backward(x: &[f64], xhat: &[f64], gxhat: &[f64], c: usize, eps: f64) -> Vec<f64> {
    let mut gx = vec![0.0; x.len()];
    for r in 0..x.len() / c {
        let xs = &x[r * c..(r + 1) * c];
        let mean = xs.iter().sum::<f64>() / c as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let gh = &gxhat[r * c..(r + 1) * c];
        let xh = &xhat[r * c..(r + 1) * c];
        let mg = gh.iter().sum::<f64>() / c as f64;
        let mgx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for j in 0..c {
            gx[r * c + j] = inv * (gh[j] - mg - xh[j] * mgx);
        }
    }
    gx
}

fn rope_apply(x: &Tensor, table: &RopeTable, inverse: bool, op: &'static str) -> Result<Tensor, NumericsError> {
    let (l, c) = as_matrix(x, op)?;
    let d = 2 * table.pairs;
    require(l == table.tokens && d > 0 && c % d == 0, op, || {
        format!("x {:?} vs table {} tokens x {} pairs", x.shape(), table.tokens, table.pairs)
    })?;
    let mut data = x.data().to_vec();
    for (i, row) in data.chunks_mut(c).enumerate() {
        for head in row.chunks_mut(d) {
            table.rotate(i, head, inverse);
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), x.dtype(), data))
}

struct HeadDims {
    l: usize,
    dk: usize,
    dv: usize,
}

fn linear_dims(
    fq: &Tensor,
    fk: &Tensor,
    v: &Tensor,
    heads: usize,
    rope: Option<&RopeTable>,
    prefix: Option<&LinearPrefix>,
) -> Result<HeadDims, NumericsError> {
    let op = "linear_attention";
    let (l, ck) = as_matrix(fq, op)?;
    let (lk, ck2) = as_matrix(fk, op)?;
    let (lv, cv) = as_matrix(v, op)?;
    require(l == lk && l == lv && ck == ck2, op, || format!("q {:?} k {:?} v {:?}", fq.shape(), fk.shape(), v.shape()))?;
    require(heads > 0 && ck % heads == 0 && cv % heads == 0, op, || format!("{heads} heads vs {ck}/{cv} channels"))?;
    let (dk, dv) = (ck / heads, cv / heads);
    if let Some(t) = rope {
        require(t.tokens == l && 2 * t.pairs == dk, op, || {
            format!("rope table {}x{} vs L={l}, dk={dk}", t.tokens, t.pairs)
        })?;
    }
    if let Some(p) = prefix {
        require(p.heads == heads && p.dk == dk && p.dv == dv, op, || "prefix state dims differ".into())?;
    }
    Ok(HeadDims { l, dk, dv })
}

fn rotated(x: &Tensor, rope: Option<&RopeTable>, heads: usize, inverse: bool) -> Vec<f64> {
    let mut data = x.data().to_vec();
    if let Some(t) = rope {
        let c = x.cols();
        let d = c / heads;
        for (i, row) in data.chunks_mut(c).enumerate() {
            for h in row.chunks_mut(d) {
                t.rotate(i, h, inverse);
            }
        }
    }
    data
}

/// O(L) evaluation of kernelized attention. Returns the output and the final
/// accumulated state (prefix plus every key in the input).
///
/// `y_i = (R_i fq_i)^T S_i / (fq_i^T z_i + eps)` where `S_i`, `z_i` sum the
/// (rotated) key features times values and the unrotated key features over
/// the visible keys.
#[allow(clippy::too_many_arguments)]
pub fn linear_attention_forward(
    fq: &Tensor,
    fk: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
    eps: f64,
    rope: Option<&RopeTable>,
    prefix: Option<&LinearPrefix>,
) -> Result<(Tensor, LinearPrefix), NumericsError> {
    let HeadDims { l, dk, dv } = linear_dims(fq, fk, v, heads, rope, prefix)?;
    let rq = rotated(fq, rope, heads, false);
    let rk = rotated(fk, rope, heads, false);
    let (ck, cv) = (heads * dk, heads * dv);
    let mut state = prefix.cloned().unwrap_or_else(|| LinearPrefix::zeros(heads, dk, dv));
    let mut out = vec![0.0; l * cv];

    let accumulate = |state: &mut LinearPrefix, j: usize| {
        for h in 0..heads {
            let s = &mut state.s[h * dk * dv..(h + 1) * dk * dv];
            let vj = &v.data()[j * cv + h * dv..j * cv + (h + 1) * dv];
            for a in 0..dk {
                let kf = rk[j * ck + h * dk + a];
                for (sv, &vv) in s[a * dv..(a + 1) * dv].iter_mut().zip(vj) {
                    *sv += kf * vv;
                }
                state.z[h * dk + a] += fk.data()[j * ck + h * dk + a];
            }
        }
    };

    let mut emit = |state: &LinearPrefix, i: usize| -> Result<(), NumericsError> {
        for h in 0..heads {
            let s = &state.s[h * dk * dv..(h + 1) * dk * dv];
            let z = &state.z[h * dk..(h + 1) * dk];
            let q = &fq.data()[i * ck + h * dk..i * ck + (h + 1) * dk];
            let den_raw: f64 = q.iter().zip(z).map(|(a, b)| a * b).sum();
            if !(den_raw >= eps) {
                return Err(NumericsError::DegenerateDenominator { row: i, head: h, value: den_raw, floor: eps });
            }
            let den = den_raw + eps;
            let o = &mut out[i * cv + h * dv..i * cv + (h + 1) * dv];
            for a in 0..dk {
                let qa = rq[i * ck + h * dk + a] / den;
                for (ov, &sv) in o.iter_mut().zip(&s[a * dv..(a + 1) * dv]) {
                    *ov += qa * sv;
                }
            }
        }
        Ok(())
    };

    if causal {
        for i in 0..l {
            accumulate(&mut state, i);
            emit(&state, i)?;
        }
    } else {
        for j in 0..l {
            accumulate(&mut state, j);
        }
        for i in 0..l {
            emit(&state, i)?;
        }
    }
    let dtype = fq.dtype().promote(fk.dtype()).promote(v.dtype());
    Ok((Tensor::from_parts(vec![l, cv], dtype, out), state))
}

#[allow(clippy::too_many_arguments)]
fn linear_attention_vjp(
    fq: &Tensor,
    fk: &Tensor,
    v: &Tensor,
    g: &Tensor,
    heads: usize,
    causal: bool,
    eps: f64,
    rope: Option<&RopeTable>,
    prefix: Option<&LinearPrefix>,
) -> Result<Vec<Tensor>, NumericsError> {
    let HeadDims { l, dk, dv } = linear_dims(fq, fk, v, heads, rope, prefix)?;
    let (ck, cv) = (heads * dk, heads * dv);
    let rq = rotated(fq, rope, heads, false);
    let rk = rotated(fk, rope, heads, false);
    let mut g_rq = vec![0.0; l * ck];
    let mut g_fq = vec![0.0; l * ck];
    let mut g_rk = vec![0.0; l * ck];
    let mut g_fk = vec![0.0; l * ck];
    let mut g_v = vec![0.0; l * cv];

    for h in 0..heads {
        let ko = |r: usize| r * ck + h * dk;
        let vo = |r: usize| r * cv + h * dv;
        // Forward sweep: per-row state, output, and cotangents of numerator/denominator.
        let (mut s, mut z) = match prefix {
            Some(p) => (p.s[h * dk * dv..(h + 1) * dk * dv].to_vec(), p.z[h * dk..(h + 1) * dk].to_vec()),
            None => (vec![0.0; dk * dv], vec![0.0; dk]),
        };
        let add_key = |s: &mut [f64], z: &mut [f64], j: usize| {
            for a in 0..dk {
                let kf = rk[ko(j) + a];
                for b in 0..dv {
                    s[a * dv + b] += kf * v.data()[vo(j) + b];
                }
                z[a] += fk.data()[ko(j) + a];
            }
        };
        if !causal {
            for j in 0..l {
                add_key(&mut s, &mut z, j);
            }
        }
        let mut g_num = vec![0.0; l * dv];
        let mut g_den = vec![0.0; l];
        for i in 0..l {
            if causal {
                add_key(&mut s, &mut z, i);
            }
            let q = &fq.data()[ko(i)..ko(i) + dk];
            let den = q.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() + eps;
            let mut num = vec![0.0; dv];
            for a in 0..dk {
                for b in 0..dv {
                    num[b] += rq[ko(i) + a] * s[a * dv + b];
                }
            }
            let gi = &g.data()[vo(i)..vo(i) + dv];
            let mut gd = 0.0;
            for b in 0..dv {
                g_num[i * dv + b] = gi[b] / den;
                gd -= gi[b] * num[b] / (den * den);
            }
            g_den[i] = gd;
            for a in 0..dk {
                let mut acc = 0.0;
                for b in 0..dv {
                    acc += s[a * dv + b] * g_num[i * dv + b];
                }
                g_rq[ko(i) + a] = acc;
                g_fq[ko(i) + a] = gd * z[a];
            }
        }
        // Reverse sweep over keys: A = sum rq g_num^T, B = sum g_den fq over visible queries.
        let mut amat = vec![0.0; dk * dv];
        let mut bvec = vec![0.0; dk];
        let add_query = |amat: &mut [f64], bvec: &mut [f64], i: usize| {
            for a in 0..dk {
                let qa = rq[ko(i) + a];
                for b in 0..dv {
                    amat[a * dv + b] += qa * g_num[i * dv + b];
                }
                bvec[a] += g_den[i] * fq.data()[ko(i) + a];
            }
        };
        if !causal {
            for i in 0..l {
                add_query(&mut amat, &mut bvec, i);
            }
        }
        for j in (0..l).rev() {
            if causal {
                add_query(&mut amat, &mut bvec, j);
            }
            for a in 0..dk {
                let mut acc = 0.0;
                for b in 0..dv {
                    acc += amat[a * dv + b] * v.data()[vo(j) + b];
                }
                g_rk[ko(j) + a] = acc;
                g_fk[ko(j) + a] = bvec[a];
            }
            for b in 0..dv {
                let mut acc = 0.0;
                for a in 0..dk {
                    acc += amat[a * dv + b] * rk[ko(j) + a];
                }
                g_v[vo(j) + b] = acc;
            }
        }
    }
    let g_rq_t = Tensor::from_parts(vec![l, ck], DType::F64, g_rq);
    let g_rk_t = Tensor::from_parts(vec![l, ck], DType::F64, g_rk);
    let back_q = rotated(&g_rq_t, rope, heads, true);
    let back_k = rotated(&g_rk_t, rope, heads, true);
    for i in 0..l * ck {
        g_fq[i] += back_q[i];
        g_fk[i] += back_k[i];
    }
    Ok(vec![
        Tensor::from_parts(vec![l, ck], DType::F64, g_fq),
        Tensor::from_parts(vec![l, ck], DType::F64, g_fk),
        Tensor::from_parts(vec![l, cv], DType::F64, g_v),
    ])
}

struct AttnDims {
    lq: usize,
    lk: usize,
    p: usize,
    d: usize,
    dv: usize,
}

fn attention_dims(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
    prefix: Option<&KvPrefix>,
) -> Result<AttnDims, NumericsError> {
    let op = "attention";
    let (lq, cq) = as_matrix(q, op)?;
    let (lk, ck) = as_matrix(k, op)?;
    let (lv, cv) = as_matrix(v, op)?;
    require(cq == ck && lk == lv, op, || format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()))?;
    require(heads > 0 && cq % heads == 0 && cv % heads == 0, op, || format!("{heads} heads vs {cq}/{cv}"))?;
    require(!causal || lq == lk, op, || format!("causal attention needs Lq == Lk, got {lq} vs {lk}"))?;
    let p = match prefix {
        Some(pre) => {
            require(pre.keys.cols() == ck && pre.values.cols() == cv && pre.keys.rows() == pre.values.rows(), op, || {
                format!("prefix {:?}/{:?}", pre.keys.shape(), pre.values.shape())
            })?;
            pre.keys.rows()
        }
        None => 0,
    };
    Ok(AttnDims { lq, lk, p, d: cq / heads, dv: cv / heads })
}

/// Softmax attention; keys/values of `prefix` are visible to every query.
/// Returns the output and the attention probabilities `[heads, Lq, P + Lk]`.
pub fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
    prefix: Option<&KvPrefix>,
) -> Result<(Tensor, Vec<f64>), NumericsError> {
    let AttnDims { lq, lk, p, d, dv } = attention_dims(q, k, v, heads, causal, prefix)?;
    let (cq, cv) = (heads * d, heads * dv);
    let total = p + lk;
    let scale = 1.0 / (d as f64).sqrt();
    let key = |j: usize| -> &[f64] {
        if j < p {
            prefix.unwrap().keys.row(j)
        } else {
            k.row(j - p)
        }
    };
    let val = |j: usize| -> &[f64] {
        if j < p {
            prefix.unwrap().values.row(j)
        } else {
            v.row(j - p)
        }
    };
    let mut probs = vec![0.0; heads * lq * total];
    let mut out = vec![0.0; lq * cv];
    for h in 0..heads {
        for i in 0..lq {
            let visible = if causal { p + i + 1 } else { total };
            let qi = &q.data()[i * cq + h * d..i * cq + (h + 1) * d];
            let pr = &mut probs[(h * lq + i) * total..(h * lq + i + 1) * total];
            let mut m = f64::NEG_INFINITY;
            for j in 0..visible {
                let kj = &key(j)[h * d..(h + 1) * d];
                let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                pr[j] = s;
                m = m.max(s);
            }
            let mut sum = 0.0;
            for x in pr[..visible].iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            let o = &mut out[i * cv + h * dv..i * cv + (h + 1) * dv];
            for j in 0..visible {
                pr[j] /= sum;
                let vj = &val(j)[h * dv..(h + 1) * dv];
                for (ov, &vv) in o.iter_mut().zip(vj) {
                    *ov += pr[j] * vv;
                }
            }
        }
    }
    let dtype = q.dtype().promote(k.dtype()).promote(v.dtype());
    Ok((Tensor::from_parts(vec![lq, cv], dtype, out), probs))
}

fn attention_vjp(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    g: &Tensor,
    heads: usize,
    causal: bool,
    prefix: Option<&KvPrefix>,
) -> Result<Vec<Tensor>, NumericsError> {
    let AttnDims { lq, lk, p, d, dv } = attention_dims(q, k, v, heads, causal, prefix)?;
    let (_, probs) = attention_forward(q, k, v, heads, causal, prefix)?;
    let (cq, cv) = (heads * d, heads * dv);
    let total = p + lk;
    let scale = 1.0 / (d as f64).sqrt();
    let key = |j: usize| -> &[f64] {
        if j < p {
            prefix.unwrap().keys.row(j)
        } else {
            k.row(j - p)
        }
    };
    let val = |j: usize| -> &[f64] {
        if j < p {
            prefix.unwrap().values.row(j)
        } else {
            v.row(j - p)
        }
    };
    let mut gq = vec![0.0; lq * cq];
    let mut gk = vec![0.0; lk * cq];
    let mut gv = vec![0.0; lk * cv];
    let mut gp = vec![0.0; total];
    for h in 0..heads {
        for i in 0..lq {
            let visible = if causal { p + i + 1 } else { total };
            let pr = &probs[(h * lq + i) * total..(h * lq + i + 1) * total];
            let gi = &g.data()[i * cv + h * dv..i * cv + (h + 1) * dv];
            let mut dot = 0.0;
            for j in 0..visible {
                let vj = &val(j)[h * dv..(h + 1) * dv];
                gp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += pr[j] * gp[j];
                if j >= p {
                    let gvj = &mut gv[(j - p) * cv + h * dv..(j - p) * cv + (h + 1) * dv];
                    for (x, &gg) in gvj.iter_mut().zip(gi) {
                        *x += pr[j] * gg;
                    }
                }
            }
            let qi = &q.data()[i * cq + h * d..i * cq + (h + 1) * d];
            for j in 0..visible {
                let gs = pr[j] * (gp[j] - dot) * scale;
                if gs == 0.0 {
                    continue;
                }
                let kj = &key(j)[h * d..(h + 1) * d];
                for a in 0..d {
                    gq[i * cq + h * d + a] += gs * kj[a];
                }
                if j >= p {
                    for a in 0..d {
                        gk[(j - p) * cq + h * d + a] += gs * qi[a];
                    }
                }
            }
        }
    }
    Ok(vec![
        Tensor::from_parts(vec![lq, cq], DType::F64, gq),
        Tensor::from_parts(vec![lk, cq], DType::F64, gk),
        Tensor::from_parts(vec![lk, cv], DType::F64, gv),
    ])
}

fn conv_check(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    grid: Grid3,
    kernel: (usize, usize, usize),
    history: Option<&Tensor>,
) -> Result<usize, NumericsError> {
    let op = "depthwise_conv3d";
    let (l, c) = as_matrix(x, op)?;
    let (kt, kh, kw) = kernel;
    require(l == grid.tokens(), op, || format!("{l} tokens vs grid {grid:?}"))?;
    require(kt >= 1 && kh % 2 == 1 && kw % 2 == 1, op, || format!("kernel {kernel:?} must have odd spatial extent"))?;
    require(kh < 2 * grid.h && kw < 2 * grid.w, op, || format!("kernel {kernel:?} exceeds padded extent of grid {grid:?}"))?;
    require(w.numel() == kt * kh * kw * c && b.numel() == c, op, || {
        format!("weights {:?} / bias {:?} vs kernel {kernel:?} x C={c}", w.shape(), b.shape())
    })?;
    if let Some(hist) = history {
        require(hist.numel() == (kt - 1) * grid.h * grid.w * c, op, || {
            format!("history {:?} vs {} frames of {}x{}x{c}", hist.shape(), kt - 1, grid.h, grid.w)
        })?;
    }
    Ok(c)
}

/// Value of the temporally left-extended input at frame `ft` (history frames occupy `0..kt-1`).
#[inline]
fn ext_value(x: &[f64], history: Option<&Tensor>, hist_frames: usize, plane: usize, ft: usize, idx: usize) -> f64 {
    if ft < hist_frames {
        history.map_or(0.0, |h| h.data()[ft * plane + idx])
    } else {
        x[(ft - hist_frames) * plane + idx]
    }
}

fn conv3d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    grid: Grid3,
    kernel: (usize, usize, usize),
    history: Option<&Tensor>,
) -> Result<Tensor, NumericsError> {
    let c = conv_check(x, w, b, grid, kernel, history)?;
    let (kt, kh, kw) = kernel;
    let (ph, pw) = (kh / 2, kw / 2);
    let plane = grid.h * grid.w * c;
    let mut out = vec![0.0; x.numel()];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    for t in 0..grid.t {
        for hh in 0..grid.h {
            for ww in 0..grid.w {
                let o = &mut out[((t * grid.h + hh) * grid.w + ww) * c..((t * grid.h + hh) * grid.w + ww + 1) * c];
                o.copy_from_slice(bd);
                for a in 0..kt {
                    let ft = t + a;
                    for bi in 0..kh {
                        let sh = hh as isize + bi as isize - ph as isize;
                        if sh < 0 || sh >= grid.h as isize {
                            continue;
                        }
                        for e in 0..kw {
                            let sw = ww as isize + e as isize - pw as isize;
                            if sw < 0 || sw >= grid.w as isize {
                                continue;
                            }
                            let base = (sh as usize * grid.w + sw as usize) * c;
                            let wb = ((a * kh + bi) * kw + e) * c;
                            for ch in 0..c {
                                o[ch] += wd[wb + ch] * ext_value(xd, history, kt - 1, plane, ft, base + ch);
                            }
                        }
                    }
                }
            }
        }
    }
    let dtype = x.dtype().promote(w.dtype()).promote(b.dtype());
    Ok(Tensor::from_parts(x.shape().to_vec(), dtype, out))
}

fn conv3d_vjp(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    grid: Grid3,
    kernel: (usize, usize, usize),
    history: Option<&Tensor>,
) -> Vec<Tensor> {
    let c = x.cols();
    let (kt, kh, kw) = kernel;
    let (ph, pw) = (kh / 2, kw / 2);
    let plane = grid.h * grid.w * c;
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut gb = vec![0.0; c];
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    for t in 0..grid.t {
        for hh in 0..grid.h {
            for ww in 0..grid.w {
                let go = &gd[((t * grid.h + hh) * grid.w + ww) * c..((t * grid.h + hh) * grid.w + ww + 1) * c];
                for ch in 0..c {
                    gb[ch] += go[ch];
                }
                for a in 0..kt {
                    let ft = t + a;
                    for bi in 0..kh {
                        let sh = hh as isize + bi as isize - ph as isize;
                        if sh < 0 || sh >= grid.h as isize {
                            continue;
                        }
                        for e in 0..kw {
                            let sw = ww as isize + e as isize - pw as isize;
                            if sw < 0 || sw >= grid.w as isize {
                                continue;
                            }
                            let base = (sh as usize * grid.w + sw as usize) * c;
                            let wb = ((a * kh + bi) * kw + e) * c;
                            for ch in 0..c {
                                gw[wb + ch] += go[ch] * ext_value(xd, history, kt - 1, plane, ft, base + ch);
                                if ft >= kt - 1 {
                                    gx[(ft - (kt - 1)) * plane + base + ch] += go[ch] * wd[wb + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    vec![
        Tensor::from_parts(x.shape().to_vec(), DType::F64, gx),
        Tensor::from_parts(w.shape().to_vec(), DType::F64, gw),
        Tensor::from_parts(vec![c], DType::F64, gb),
    ]
}

/// Pixel-unshuffle (`inverse == false`) or pixel-shuffle. `grid` is the high-res grid
/// for unshuffle and the low-res grid for shuffle. Channel order is `(dy, dx, c)`.
fn space_to_channel(x: &Tensor, grid: Grid3, s: usize, inverse: bool) -> Result<Tensor, NumericsError> {
    let op = if inverse { "channel_to_space" } else { "space_to_channel" };
    let (l, cin) = as_matrix(x, op)?;
    require(s >= 1 && l == grid.tokens(), op, || format!("{l} tokens vs grid {grid:?}, stride {s}"))?;
    if !inverse {
        require(grid.h.is_multiple_of(s) && grid.w.is_multiple_of(s), op, || format!("grid {grid:?} not divisible by stride {s}"))?;
        let (h2, w2) = (grid.h / s, grid.w / s);
        let c = cin;
        let mut out = vec![0.0; x.numel()];
        for t in 0..grid.t {
            for i in 0..h2 {
                for j in 0..w2 {
                    let orow = ((t * h2 + i) * w2 + j) * s * s * c;
                    for dy in 0..s {
                        for dx in 0..s {
                            let src = ((t * grid.h + i * s + dy) * grid.w + j * s + dx) * c;
                            let dst = orow + (dy * s + dx) * c;
                            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![l / (s * s), s * s * c], x.dtype(), out))
    } else {
        require(cin % (s * s) == 0, op, || format!("{cin} channels not divisible by {}", s * s))?;
        let c = cin / (s * s);
        let (hh, ww) = (grid.h * s, grid.w * s);
        let mut out = vec![0.0; x.numel()];
        for t in 0..grid.t {
            for i in 0..grid.h {
                for j in 0..grid.w {
                    let irow = ((t * grid.h + i) * grid.w + j) * cin;
                    for dy in 0..s {
                        for dx in 0..s {
                            let dst = ((t * hh + i * s + dy) * ww + j * s + dx) * c;
                            let src = irow + (dy * s + dx) * c;
                            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![l * s * s, c], x.dtype(), out))
    }
}

fn avg_pool(x: &Tensor, grid: Grid3, s: usize) -> Result<Tensor, NumericsError> {
    let op = "spatial_avg_pool";
    let (l, c) = as_matrix(x, op)?;
    require(s >= 1 && l == grid.tokens() && grid.h.is_multiple_of(s) && grid.w.is_multiple_of(s), op, || {
        format!("{l} tokens on grid {grid:?} with stride {s}")
    })?;
    let (h2, w2) = (grid.h / s, grid.w / s);
    let inv = 1.0 / (s * s) as f64;
    let mut out = vec![0.0; grid.t * h2 * w2 * c];
    for t in 0..grid.t {
        for hh in 0..grid.h {
            for ww in 0..grid.w {
                let src = ((t * grid.h + hh) * grid.w + ww) * c;
                let dst = ((t * h2 + hh / s) * w2 + ww / s) * c;
                for ch in 0..c {
                    out[dst + ch] += x.data()[src + ch] * inv;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![grid.t * h2 * w2, c], x.dtype(), out))
}

fn avg_pool_vjp(g: &Tensor, grid: Grid3, s: usize, c: usize) -> Tensor {
    let (h2, w2) = (grid.h / s, grid.w / s);
    let inv = 1.0 / (s * s) as f64;
    let mut gx = vec![0.0; grid.tokens() * c];
    for t in 0..grid.t {
        for hh in 0..grid.h {
            for ww in 0..grid.w {
                let dst = ((t * grid.h + hh) * grid.w + ww) * c;
                let src = ((t * h2 + hh / s) * w2 + ww / s) * c;
                for ch in 0..c {
                    gx[dst + ch] = g.data()[src + ch] * inv;
                }
            }
        }
    }
    Tensor::from_parts(vec![grid.tokens(), c], DType::F64, gx)
}
