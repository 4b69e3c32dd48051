use std::collections::HashMap;
use std::sync::Arc;

use super::ops::{Grid3, KvPrefix, LinearPrefix, Op, RopeTable};
use super::{NumericsError, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded op application. The backward rule reads exactly the input
/// values and the output value stored on the tape for this node.
#[derive(Debug)]
pub struct OpNode {
    pub op: Op,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Linear record of op applications over a set of leaves.
///
/// With `record == false` the tape only evaluates; nodes are not kept and
/// [`Tape::backward`] is unavailable.
#[derive(Debug)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<OpNode>,
    requires_grad: Vec<bool>,
    params: HashMap<ParamId, Var>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Cotangents of every tape value reachable from the loss.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a parameter, zeros-shaped-like when it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { values: Vec::new(), nodes: Vec::new(), requires_grad: Vec::new(), params: HashMap::new(), record: true }
    }

    /// Evaluation-only tape.
    pub fn inference() -> Self {
        Self { record: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, true)
    }

    /// Leaf treated as data.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false)
    }

    /// Parameter leaf; repeated lookups of the same id share one tape value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Uses the existing tape value `var` for parameter `id`, shadowing the store.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.params.insert(id, var);
    }

    fn push(&mut self, t: Tensor, grad: bool) -> Var {
        self.values.push(t);
        self.requires_grad.push(grad);
        Var(self.values.len() - 1)
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var, NumericsError> {
        let out = {
            let refs: Vec<&Tensor> = inputs.iter().map(|v| &self.values[v.0]).collect();
            op.forward(&refs)?
        };
        let grad = self.record && inputs.iter().any(|v| self.requires_grad[v.0]);
        let var = self.push(out, grad);
        if grad {
            self.nodes.push(OpNode { op, inputs: inputs.to_vec(), output: var });
        }
        Ok(var)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if !self.record {
            return Err(NumericsError::InvalidArgument("backward on an inference tape".into()));
        }
        if self.values[loss.0].numel() != 1 {
            return Err(NumericsError::shape("backward", format!("loss has shape {:?}", self.values[loss.0].shape())));
        }
        let seed = Tensor::ones(self.values[loss.0].shape());
        self.backward_with(loss, seed)
    }

    /// Reverse sweep with an explicit output cotangent.
    pub fn backward_with(&self, output: Var, cotangent: Tensor) -> Result<Gradients, NumericsError> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[output.0] = Some(cotangent);
        for node in self.nodes.iter().rev() {
            let Some(g) = grads[node.output.0].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.values[v.0]).collect();
            let parts = node.op.vjp(&inputs, &self.values[node.output.0], &g)?;
            grads[node.output.0] = Some(g);
            for (input, part) in node.inputs.iter().zip(parts) {
                if !self.requires_grad[input.0] {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(part.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(part),
                }
            }
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    // Convenience wrappers over `apply`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.apply(Op::Matmul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, NumericsError> {
        self.apply(Op::Affine { scale, shift }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, NumericsError> {
        self.affine(x, s, 0.0)
    }

    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, NumericsError> {
        self.apply(Op::MulScalar, &[x, s])
    }

    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var, NumericsError> {
        self.apply(Op::AddRow, &[x, v])
    }

    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var, NumericsError> {
        self.apply(Op::MulRow, &[x, v])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Op::Softmax, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Op::Softplus, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Op::Silu, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Op::Relu, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        self.apply(Op::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn head_layer_norm(&mut self, x: Var, heads: usize, eps: f64) -> Result<Var, NumericsError> {
        self.apply(Op::HeadLayerNorm { heads, eps }, &[x])
    }

    pub fn mean_square(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Op::MeanSquare, &[x])
    }

    /// `mean((a - b)^2)`
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let d = self.sub(a, b)?;
        self.mean_square(d)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.apply(Op::Transpose, &[x])
    }

    pub fn head_linear(&mut self, x: Var, w: Var, heads: usize) -> Result<Var, NumericsError> {
        self.apply(Op::HeadLinear { heads }, &[x, w])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        self.apply(Op::SliceCols { start, len }, &[x])
    }

    pub fn expand_rows(&mut self, x: Var, times: usize) -> Result<Var, NumericsError> {
        if times == 1 {
            return Ok(x);
        }
        self.apply(Op::ExpandRows { times }, &[x])
    }

    pub fn rope(&mut self, x: Var, table: Arc<RopeTable>) -> Result<Var, NumericsError> {
        self.apply(Op::Rope { table }, &[x])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn linear_attention(
        &mut self,
        fq: Var,
        fk: Var,
        v: Var,
        heads: usize,
        causal: bool,
        eps: f64,
        rope: Option<Arc<RopeTable>>,
        prefix: Option<Arc<LinearPrefix>>,
    ) -> Result<Var, NumericsError> {
        self.apply(Op::LinearAttention { heads, causal, eps, rope, prefix }, &[fq, fk, v])
    }

    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        prefix: Option<Arc<KvPrefix>>,
    ) -> Result<Var, NumericsError> {
        self.apply(Op::Attention { heads, causal, prefix }, &[q, k, v])
    }

    pub fn depthwise_conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        grid: Grid3,
        kernel: (usize, usize, usize),
        history: Option<Arc<Tensor>>,
    ) -> Result<Var, NumericsError> {
        self.apply(Op::DepthwiseConv3d { grid, kernel, history }, &[x, w, b])
    }

    pub fn space_to_channel(&mut self, x: Var, grid: Grid3, stride: usize) -> Result<Var, NumericsError> {
        if stride == 1 {
            return Ok(x);
        }
        self.apply(Op::SpaceToChannel { grid, stride }, &[x])
    }

    pub fn channel_to_space(&mut self, x: Var, low_grid: Grid3, stride: usize) -> Result<Var, NumericsError> {
        if stride == 1 {
            return Ok(x);
        }
        self.apply(Op::ChannelToSpace { grid: low_grid, stride }, &[x])
    }

    /// `x . w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_accumulates_fan_out() {
        // f(x) = mean((x * x)^2) over a single element => 4 x^3
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean_square(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(x).unwrap().data()[0] - 4.0 * 1.5f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.mul(x, x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        assert!(tape.nodes().is_empty());
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.mean_square(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert!((g.get(x).unwrap().data()[0] - 2.0 * 6.0 * 3.0).abs() < 1e-12);
    }
}
