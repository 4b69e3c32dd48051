//! Central finite-difference verification of vector-Jacobian products.

use std::sync::Arc;

use super::ops::{Grid3, KvPrefix, LinearPrefix, Op, RopeTable};
use super::{DType, NumericsError, Rng, Tape, Tensor, Var};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-5;

/// Anything with a forward map and a vector-Jacobian product over a fixed input list.
pub trait Differentiable {
    fn name(&self) -> String;
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor, NumericsError>;
    fn vjp(&self, inputs: &[Tensor], output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>, NumericsError>;
}

impl<D: Differentiable + ?Sized> Differentiable for Box<D> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor, NumericsError> {
        (**self).forward(inputs)
    }

    fn vjp(&self, inputs: &[Tensor], output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>, NumericsError> {
        (**self).vjp(inputs, output, cotangent)
    }
}

impl Differentiable for Op {
    fn name(&self) -> String {
        Op::name(self).to_string()
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor, NumericsError> {
        let refs: Vec<&Tensor> = inputs.iter().collect();
        Op::forward(self, &refs)
    }

    fn vjp(&self, inputs: &[Tensor], output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>, NumericsError> {
        if !self.has_vjp() {
            return Err(NumericsError::MissingVjp(Op::name(self).to_string()));
        }
        let refs: Vec<&Tensor> = inputs.iter().collect();
        Op::vjp(self, &refs, output, cotangent)
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
    pub checked_entries: usize,
    /// `(input index, flat entry, analytic, numeric)` of the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares the analytic VJP of `f` at `inputs` against central finite differences of
/// `<f(x), g>` for a random cotangent `g`. Every input entry is perturbed.
pub fn grad_check(
    f: &dyn Differentiable,
    inputs: &[Tensor],
    tol: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport, NumericsError> {
    if let Some(bad) = inputs.iter().find(|t| t.dtype() != DType::F64) {
        return Err(NumericsError::InvalidArgument(format!(
            "grad_check needs f64 inputs, got {} for `{}`",
            bad.dtype(),
            f.name()
        )));
    }
    let out = f.forward(inputs)?;
    let cot = rng.normal_tensor(out.shape(), 1.0);
    let analytic = f.vjp(inputs, &out, &cot)?;
    if analytic.len() != inputs.len() {
        return Err(NumericsError::Arity { op: "grad_check", expected: inputs.len(), got: analytic.len() });
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_err = 0.0f64;
    let mut checked = 0;
    let mut worst = None;
    for (k, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[k].shape() {
            return Err(NumericsError::shape("grad_check", format!("vjp {k} has shape {:?}", grad.shape())));
        }
        for e in 0..inputs[k].numel() {
            let orig = work[k].data()[e];
            work[k].data_mut()[e] = orig + FD_STEP;
            let plus = f.forward(&work)?.dot(&cot);
            work[k].data_mut()[e] = orig - FD_STEP;
            let minus = f.forward(&work)?.dot(&cot);
            work[k].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.data()[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((k, e, a, numeric));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { name: f.name(), max_rel_error: max_err, tol, passed: max_err <= tol, checked_entries: checked, worst })
}

/// A differentiable map given as a function that records onto a fresh tape.
/// Each input becomes a gradient-carrying leaf.
pub struct TapeFn<F> {
    name: String,
    f: F,
}

impl<F> TapeFn<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }

    fn record(&self, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var), NumericsError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = (self.f)(&mut tape, &vars)?;
        Ok((tape, vars, out))
    }
}

impl<F> Differentiable for TapeFn<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    fn name(&self) -> String {
        self.name.clone()
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor, NumericsError> {
        let (tape, _, out) = self.record(inputs)?;
        Ok(tape.value(out).clone())
    }

    fn vjp(&self, inputs: &[Tensor], _output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>, NumericsError> {
        let (tape, vars, out) = self.record(inputs)?;
        let grads = tape.backward_with(out, cotangent.clone())?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    }
}

/// Wraps a differentiable map and perturbs its VJP; used as a negative control.
pub struct CorruptedVjp<D> {
    pub inner: D,
    pub factor: f64,
}

impl<D: Differentiable> Differentiable for CorruptedVjp<D> {
    fn name(&self) -> String {
        format!("{}[corrupted]", self.inner.name())
    }

    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor, NumericsError> {
        self.inner.forward(inputs)
    }

    fn vjp(&self, inputs: &[Tensor], output: &Tensor, cotangent: &Tensor) -> Result<Vec<Tensor>, NumericsError> {
        let grads = self.inner.vjp(inputs, output, cotangent)?;
        Ok(grads.into_iter().map(|g| g.map(|v| v * self.factor + 1e-3)).collect())
    }
}

/// A registered differentiable map with sample inputs.
pub struct GradCase {
    pub f: Box<dyn Differentiable + Send + Sync>,
    pub inputs: Vec<Tensor>,
}

impl GradCase {
    pub fn new(f: impl Differentiable + Send + Sync + 'static, inputs: Vec<Tensor>) -> Self {
        Self { f: Box::new(f), inputs }
    }

    pub fn name(&self) -> String {
        self.f.name()
    }

    pub fn check(&self, tol: f64, rng: &mut Rng) -> Result<GradCheckReport, NumericsError> {
        grad_check(self.f.as_ref(), &self.inputs, tol, rng)
    }
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.uniform_tensor(shape, 0.2, 1.5)
}

fn random_rope(rng: &mut Rng, tokens: usize, pairs: usize) -> Arc<RopeTable> {
    let angles: Vec<f64> = (0..tokens * pairs).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
    Arc::new(RopeTable {
        tokens,
        pairs,
        cos: angles.iter().map(|a| a.cos()).collect(),
        sin: angles.iter().map(|a| a.sin()).collect(),
    })
}

/// Every registered op of the catalog paired with random inputs drawn from `seed`.
/// `OneHotArgmax` and `StraightThrough` are excluded: the first has no VJP and the
/// second's VJP is the identity by contract, not the derivative of its forward.
pub fn op_catalog(seed: u64) -> Vec<GradCase> {
    let mut rng = Rng::new(seed);
    let r = &mut rng;
    let grid = Grid3 { t: 3, h: 2, w: 4 };
    let low = Grid3 { t: 3, h: 1, w: 2 };
    let mut cases = vec![
        GradCase::new(Op::Matmul, vec![r.normal_tensor(&[4, 4], 1.0), r.normal_tensor(&[4, 4], 1.0)]),
        GradCase::new(Op::Matmul, vec![r.normal_tensor(&[3, 5], 1.0), r.normal_tensor(&[5, 2], 1.0)]),
        GradCase::new(Op::Add, vec![r.normal_tensor(&[3, 4], 1.0), r.normal_tensor(&[3, 4], 1.0)]),
        GradCase::new(Op::Sub, vec![r.normal_tensor(&[3, 4], 1.0), r.normal_tensor(&[3, 4], 1.0)]),
        GradCase::new(Op::Mul, vec![r.normal_tensor(&[3, 4], 1.0), r.normal_tensor(&[3, 4], 1.0)]),
        GradCase::new(Op::Affine { scale: -1.7, shift: 0.3 }, vec![r.normal_tensor(&[5], 1.0)]),
        GradCase::new(Op::MulScalar, vec![r.normal_tensor(&[3, 4], 1.0), r.normal_tensor(&[1], 1.0)]),
        GradCase::new(Op::AddRow, vec![r.normal_tensor(&[3, 4], 1.0), r.normal_tensor(&[4], 1.0)]),
        GradCase::new(Op::MulRow, vec![r.normal_tensor(&[3, 4], 1.0), r.normal_tensor(&[4], 1.0)]),
        GradCase::new(Op::Softmax, vec![r.normal_tensor(&[3, 5], 2.0)]),
        GradCase::new(Op::Sigmoid, vec![r.normal_tensor(&[6], 2.0)]),
        GradCase::new(Op::Softplus, vec![r.normal_tensor(&[6], 3.0)]),
        GradCase::new(Op::Silu, vec![r.normal_tensor(&[6], 2.0)]),
        GradCase::new(Op::Relu, vec![r.normal_tensor(&[6], 2.0).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })]),
        GradCase::new(
            Op::LayerNorm { eps: 1e-5 },
            vec![r.normal_tensor(&[3, 6], 2.0), r.normal_tensor(&[6], 1.0), r.normal_tensor(&[6], 1.0)],
        ),
        GradCase::new(Op::HeadLayerNorm { heads: 2, eps: 1e-6 }, vec![r.normal_tensor(&[3, 8], 2.0)]),
        GradCase::new(Op::MeanSquare, vec![r.normal_tensor(&[3, 4], 1.0)]),
        GradCase::new(Op::Reshape { shape: vec![2, 6] }, vec![r.normal_tensor(&[3, 4], 1.0)]),
        GradCase::new(Op::Transpose, vec![r.normal_tensor(&[3, 4], 1.0)]),
        GradCase::new(Op::HeadLinear { heads: 2 }, vec![r.normal_tensor(&[3, 6], 1.0), r.normal_tensor(&[2, 3, 4], 1.0)]),
        GradCase::new(Op::SliceCols { start: 1, len: 2 }, vec![r.normal_tensor(&[3, 4], 1.0)]),
        GradCase::new(Op::ExpandRows { times: 3 }, vec![r.normal_tensor(&[2, 4], 1.0)]),
        GradCase::new(Op::Rope { table: random_rope(r, 4, 2) }, vec![r.normal_tensor(&[4, 8], 1.0)]),
    ];
    for causal in [false, true] {
        cases.push(GradCase::new(
            Op::LinearAttention { heads: 2, causal, eps: 1e-6, rope: Some(random_rope(r, 5, 2)), prefix: None },
            vec![positive(r, &[5, 8]), positive(r, &[5, 8]), r.normal_tensor(&[5, 6], 1.0)],
        ));
        let mut prefix = LinearPrefix::zeros(2, 4, 3);
        prefix.s.iter_mut().for_each(|v| *v = r.normal());
        prefix.z.iter_mut().for_each(|v| *v = r.uniform_range(0.5, 2.0));
        cases.push(GradCase::new(
            Op::LinearAttention { heads: 2, causal, eps: 1e-6, rope: None, prefix: Some(Arc::new(prefix)) },
            vec![positive(r, &[4, 8]), positive(r, &[4, 8]), r.normal_tensor(&[4, 6], 1.0)],
        ));
        cases.push(GradCase::new(
            Op::Attention { heads: 2, causal, prefix: None },
            vec![r.normal_tensor(&[5, 8], 1.0), r.normal_tensor(&[5, 8], 1.0), r.normal_tensor(&[5, 6], 1.0)],
        ));
        let kv = KvPrefix { keys: r.normal_tensor(&[3, 8], 1.0), values: r.normal_tensor(&[3, 6], 1.0) };
        cases.push(GradCase::new(
            Op::Attention { heads: 2, causal, prefix: Some(Arc::new(kv)) },
            vec![r.normal_tensor(&[4, 8], 1.0), r.normal_tensor(&[4, 8], 1.0), r.normal_tensor(&[4, 6], 1.0)],
        ));
    }
    cases.push(GradCase::new(
        Op::Attention { heads: 1, causal: false, prefix: None },
        vec![r.normal_tensor(&[5, 4], 1.0), r.normal_tensor(&[2, 4], 1.0), r.normal_tensor(&[2, 3], 1.0)],
    ));
    let history = r.normal_tensor(&[2 * 2 * 4, 3], 1.0);
    for hist in [None, Some(Arc::new(history))] {
        cases.push(GradCase::new(
            Op::DepthwiseConv3d { grid, kernel: (3, 3, 3), history: hist },
            vec![r.normal_tensor(&[grid.tokens(), 3], 1.0), r.normal_tensor(&[3, 3, 3, 3], 0.5), r.normal_tensor(&[3], 1.0)],
        ));
    }
    cases.push(GradCase::new(Op::SpaceToChannel { grid, stride: 2 }, vec![r.normal_tensor(&[grid.tokens(), 2], 1.0)]));
    cases.push(GradCase::new(Op::ChannelToSpace { grid: low, stride: 2 }, vec![r.normal_tensor(&[low.tokens(), 8], 1.0)]));
    cases.push(GradCase::new(Op::SpatialAvgPool { grid, stride: 2 }, vec![r.normal_tensor(&[grid.tokens(), 2], 1.0)]));
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_and_matmul_pass_tight() {
        let mut rng = Rng::new(11);
        let x = rng.normal_tensor(&[8], 2.0);
        assert!(grad_check(&Op::Softplus, &[x], 1e-6, &mut rng).unwrap().passed);
        let a = rng.normal_tensor(&[4, 4], 1.0);
        let b = rng.normal_tensor(&[4, 4], 1.0);
        let rep = grad_check(&Op::Matmul, &[a, b], 1e-6, &mut rng).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn corrupted_vjp_fails() {
        let mut rng = Rng::new(12);
        let x = rng.normal_tensor(&[6], 1.0);
        let bad = CorruptedVjp { inner: Op::Softplus, factor: 1.1 };
        let rep = grad_check(&bad, &[x], 1e-4, &mut rng).unwrap();
        assert!(!rep.passed);
    }

    #[test]
    fn missing_vjp_is_an_error() {
        let mut rng = Rng::new(13);
        let x = rng.normal_tensor(&[1, 3], 1.0);
        assert!(matches!(grad_check(&Op::OneHotArgmax, &[x], 1e-4, &mut rng), Err(NumericsError::MissingVjp(_))));
    }

    #[test]
    fn f32_inputs_rejected() {
        let mut rng = Rng::new(14);
        let x = rng.normal_tensor(&[3], 1.0).to_dtype(DType::F32);
        assert!(matches!(grad_check(&Op::Sigmoid, &[x], 1e-4, &mut rng), Err(NumericsError::InvalidArgument(_))));
    }

    #[test]
    fn whole_catalog_passes_on_sixteen_seeds() {
        for seed in 0..16 {
            let mut rng = Rng::new(1000 + seed);
            for case in op_catalog(seed) {
                let rep = case.check(1e-4, &mut rng).unwrap_or_else(|e| panic!("{}: {e}", case.name()));
                assert!(rep.passed, "seed {seed}: {rep:?}");
            }
        }
    }
}
