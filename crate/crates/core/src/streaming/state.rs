use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{KvPrefix, LinearPrefix, RopeTable, Tensor};

const F64_BYTES: usize = std::mem::size_of::<f64>();

/// Running linear-attention sums for every head of one LCHA block.
///
/// `S` accumulates rotated key features times values, `z` the unrotated key
/// features. Both are kept in f64 whatever the weight dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct LinAttnState {
    prefix: Arc<LinearPrefix>,
    tokens: usize,
}

impl LinAttnState {
    pub fn new(heads: usize, dk: usize, dv: usize) -> Self {
        Self { prefix: Arc::new(LinearPrefix::zeros(heads, dk, dv)), tokens: 0 }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn prefix(&self) -> Arc<LinearPrefix> {
        Arc::clone(&self.prefix)
    }

    pub fn s(&self) -> &[f64] {
        &self.prefix.s
    }

    pub fn z(&self) -> &[f64] {
        &self.prefix.z
    }

    /// Adds `fk: [L, heads*dk]` (kernel features, unrotated) and `v: [L, heads*dv]`
    /// in token order. `rope` rotates the keys entering `S`.
    pub fn absorb(&mut self, fk: &Tensor, v: &Tensor, rope: Option<&RopeTable>) -> Result<()> {
        let p = Arc::make_mut(&mut self.prefix);
        let (heads, dk, dv) = (p.heads, p.dk, p.dv);
        if fk.cols() != heads * dk || v.cols() != heads * dv || fk.rows() != v.rows() {
            return Err(Error::StateMismatch(format!(
                "absorb {:?}/{:?} into state with {heads} heads, dk={dk}, dv={dv}",
                fk.shape(),
                v.shape()
            )));
        }
        let mut rk = vec![0.0; dk];
        for j in 0..fk.rows() {
            let (krow, vrow) = (fk.row(j), v.row(j));
            for h in 0..heads {
                rk.copy_from_slice(&krow[h * dk..(h + 1) * dk]);
                if let Some(t) = rope {
                    t.rotate(j, &mut rk, false);
                }
                let s = &mut p.s[h * dk * dv..(h + 1) * dk * dv];
                let vj = &vrow[h * dv..(h + 1) * dv];
                for a in 0..dk {
                    for (sv, &vv) in s[a * dv..(a + 1) * dv].iter_mut().zip(vj) {
                        *sv += rk[a] * vv;
                    }
                    p.z[h * dk + a] += krow[h * dk + a];
                }
            }
        }
        self.tokens += fk.rows();
        Ok(())
    }

    pub fn bytes(&self) -> usize {
        (self.prefix.s.len() + self.prefix.z.len()) * F64_BYTES
    }

    pub fn reset(&mut self) {
        let p = Arc::make_mut(&mut self.prefix);
        p.s.iter_mut().for_each(|v| *v = 0.0);
        p.z.iter_mut().for_each(|v| *v = 0.0);
        self.tokens = 0;
    }
}

/// The last `kt - 1` input frames of a causal conv, zero-filled until written.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvRing {
    capacity: usize,
    plane: usize,
    frames: VecDeque<Vec<f64>>,
}

impl ConvRing {
    /// `plane` is the number of values per frame (`H * W * C`).
    pub fn new(capacity: usize, plane: usize) -> Self {
        Self { capacity, plane, frames: (0..capacity).map(|_| vec![0.0; plane]).collect() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// History tensor `[capacity * H*W, C]`, oldest frame first; `None` when `kt == 1`.
    pub fn history(&self, channels: usize) -> Option<Arc<Tensor>> {
        if self.capacity == 0 {
            return None;
        }
        let data: Vec<f64> = self.frames.iter().flat_map(|f| f.iter().copied()).collect();
        let rows = self.capacity * self.plane / channels;
        Some(Arc::new(Tensor::new(vec![rows, channels], data).expect("ring plane is a multiple of channels")))
    }

    /// Pushes every frame of `x: [frames * H*W, C]`, evicting the oldest.
    pub fn push_frames(&mut self, x: &Tensor) -> Result<()> {
        if self.capacity == 0 {
            return Ok(());
        }
        if !x.numel().is_multiple_of(self.plane) {
            return Err(Error::StateMismatch(format!("{:?} is not a whole number of {}-value frames", x.shape(), self.plane)));
        }
        for frame in x.data().chunks(self.plane) {
            if self.frames.len() == self.capacity {
                self.frames.pop_front();
            }
            self.frames.push_back(frame.to_vec());
        }
        Ok(())
    }

    pub fn bytes(&self) -> usize {
        self.frames.iter().map(Vec::len).sum::<usize>() * F64_BYTES
    }

    pub fn reset(&mut self) {
        for f in self.frames.iter_mut() {
            f.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Post-rope keys and values of the most recent `window` chunks of one attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct SsaKvWindow {
    window: Option<usize>,
    chunks: VecDeque<(Tensor, Tensor)>,
}

impl SsaKvWindow {
    /// `None` keeps every chunk.
    pub fn new(window: Option<usize>) -> Self {
        Self { window, chunks: VecDeque::new() }
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    pub fn chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn tokens(&self) -> usize {
        self.chunks.iter().map(|(k, _)| k.rows()).sum()
    }

    pub fn prefix(&self) -> Result<Option<Arc<KvPrefix>>> {
        if self.chunks.is_empty() {
            return Ok(None);
        }
        let keys: Vec<&Tensor> = self.chunks.iter().map(|(k, _)| k).collect();
        let values: Vec<&Tensor> = self.chunks.iter().map(|(_, v)| v).collect();
        Ok(Some(Arc::new(KvPrefix { keys: Tensor::concat_rows(&keys)?, values: Tensor::concat_rows(&values)? })))
    }

    pub fn push(&mut self, keys: Tensor, values: Tensor) {
        self.chunks.push_back((keys, values));
        if let Some(w) = self.window {
            while self.chunks.len() > w {
                self.chunks.pop_front();
            }
        }
    }

    pub fn bytes(&self) -> usize {
        self.chunks.iter().map(|(k, v)| k.numel() + v.numel()).sum::<usize>() * F64_BYTES
    }

    pub fn reset(&mut self) {
        self.chunks.clear();
    }
}

/// Streaming cache owned by one block.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockCache {
    Lcha { lin: LinAttnState, ring: ConvRing },
    Attention { kv: SsaKvWindow },
}

impl BlockCache {
    pub fn reset(&mut self) {
        match self {
            BlockCache::Lcha { lin, ring } => {
                lin.reset();
                ring.reset();
            }
            BlockCache::Attention { kv } => kv.reset(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn ring_keeps_last_frames() {
        let mut ring = ConvRing::new(2, 2);
        assert_eq!(ring.bytes(), 32);
        ring.push_frames(&Tensor::new(vec![3, 2], vec![1., 1., 2., 2., 3., 3.]).unwrap()).unwrap();
        assert_eq!(ring.history(2).unwrap().data(), &[2., 2., 3., 3.]);
        ring.push_frames(&Tensor::new(vec![1, 2], vec![4., 4.]).unwrap()).unwrap();
        assert_eq!(ring.history(2).unwrap().data(), &[3., 3., 4., 4.]);
        assert_eq!(ring.len(), 2);
        assert_eq!(ring.bytes(), 32);
        ring.reset();
        assert_eq!(ring.history(2).unwrap().data(), &[0.; 4]);
    }

    #[test]
    fn kv_window_evicts_whole_chunks() {
        let mut kv = SsaKvWindow::new(Some(2));
        for i in 0..5 {
            kv.push(Tensor::full(&[3, 2], i as f64), Tensor::full(&[3, 2], i as f64));
        }
        assert_eq!(kv.chunks(), 2);
        assert_eq!(kv.tokens(), 6);
        let p = kv.prefix().unwrap().unwrap();
        assert_eq!(p.keys.row(0), &[3.0, 3.0]);
        kv.reset();
        assert!(kv.prefix().unwrap().is_none());
    }

    #[test]
    fn lin_state_counts_tokens_and_stays_positive() {
        let mut rng = Rng::new(4);
        let mut st = LinAttnState::new(2, 3, 2);
        let bytes = st.bytes();
        for _ in 0..3 {
            let fk = rng.uniform_tensor(&[4, 6], 0.1, 1.0);
            let v = rng.normal_tensor(&[4, 4], 1.0);
            st.absorb(&fk, &v, None).unwrap();
        }
        assert_eq!(st.tokens(), 12);
        assert!(st.z().iter().all(|&z| z > 0.0));
        assert_eq!(st.bytes(), bytes);
        st.reset();
        assert_eq!(st.tokens(), 0);
        assert!(st.s().iter().all(|&v| v == 0.0));
    }
}
