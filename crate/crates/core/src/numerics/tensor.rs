use std::fmt;

use super::NumericsError;

/// Element type carried by a [`Tensor`].
///
/// Storage is always `f64`; `F32` tensors hold values that are exactly
/// representable in single precision (every constructor rounds).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Wider of the two types.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F64 || other == DType::F64 {
            DType::F64
        } else {
            DType::F32
        }
    }

    #[inline]
    pub(crate) fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" | "float32" => Ok(DType::F32),
            "f64" | "float64" => Ok(DType::F64),
            other => Err(format!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

/// Dense row-major tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", self.dtype, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Tensor {
    /// Builds an `F64` tensor, validating the shape against the buffer length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        Self::with_dtype(shape, DType::F64, data)
    }

    pub fn with_dtype(shape: Vec<usize>, dtype: DType, mut data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.contains(&0) {
            return Err(NumericsError::InvalidShape(format!("zero extent in {shape:?}")));
        }
        let numel = checked_numel(&shape)
            .ok_or_else(|| NumericsError::InvalidShape(format!("element count overflows for {shape:?}")))?;
        if numel != data.len() {
            return Err(NumericsError::InvalidShape(format!(
                "shape {shape:?} implies {numel} values, got {}",
                data.len()
            )));
        }
        if dtype == DType::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        Ok(Self { shape, dtype, data })
    }

    /// Internal constructor for op outputs whose shape is already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, dtype: DType, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(checked_numel(&shape), Some(data.len()));
        if dtype == DType::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        Self { shape, dtype, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = checked_numel(shape).expect("shape overflow");
        Self::from_parts(shape.to_vec(), DType::F64, vec![0.0; n])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = checked_numel(shape).expect("shape overflow");
        Self::from_parts(shape.to_vec(), DType::F64, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], DType::F64, vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::from_parts(vec![n, n], DType::F64, data)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = checked_numel(shape).expect("shape overflow");
        Self::from_parts(shape.to_vec(), DType::F64, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Callers writing non-representable values
    /// into an `F32` tensor must call [`Tensor::to_dtype`] afterwards.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        Self::from_parts(self.shape.clone(), dtype, self.data.clone())
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    /// Product of all axes except the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor, NumericsError> {
        match checked_numel(shape) {
            Some(n) if n == self.numel() && !shape.contains(&0) => {
                Ok(Tensor { shape: shape.to_vec(), dtype: self.dtype, data: self.data.clone() })
            }
            _ => Err(NumericsError::shape("reshape", format!("{:?} -> {shape:?}", self.shape))),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.dtype, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
        if self.shape != other.shape {
            return Err(NumericsError::shape("zip", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.dtype.promote(other.dtype),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns `self` or a `NonFinite` error naming `op`.
    pub fn check_finite(self, op: &str) -> Result<Tensor, NumericsError> {
        if let Some(idx) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op.to_string(), index: idx, value: self.data[idx] });
        }
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest `|a - b|` over elements; `inf` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data.iter().zip(&other.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `max|a-b| / max(max|b|, tiny)`; the relative error measure used by the oracle checks.
    pub fn max_rel_diff(&self, reference: &Tensor) -> f64 {
        let scale = reference.max_abs().max(1e-300);
        self.max_abs_diff(reference) / scale
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Rows `[start, start + len)` of the leading axis, keeping trailing axes.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor, NumericsError> {
        let lead = self.shape[0];
        if start + len > lead || len == 0 {
            return Err(NumericsError::shape("slice_rows", format!("[{start}, {}) of {lead}", start + len)));
        }
        let inner = self.numel() / lead;
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self::from_parts(shape, self.dtype, self.data[start * inner..(start + len) * inner].to_vec()))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor, NumericsError> {
        let first = parts.first().ok_or_else(|| NumericsError::shape("concat_rows", "no inputs"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut dtype = first.dtype;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(NumericsError::shape("concat_rows", format!("{:?} vs {:?}", first.shape, p.shape)));
            }
            lead += p.shape[0];
            dtype = dtype.promote(p.dtype);
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Self::from_parts(shape, dtype, data))
    }
}
