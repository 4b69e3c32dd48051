//! Three-axis rotary position embedding.
//!
//! The `d/2` rotation pairs are split across `(t, h, w)` in equal thirds, the
//! remainder going to the temporal axis. Pairs are assigned in that order.
//! Within an axis owning `n` pairs, pair `i` rotates at frequency
//! `base^(-i/n)`. Temporal positions are global: a chunk starting at frame
//! `frame_offset` uses positions `frame_offset..`.

use std::sync::Arc;

use super::TokenGrid;
use crate::error::{Error, Result};
use crate::numerics::{Op, RopeTable, Tensor};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Number of rotation pairs per axis for a feature dimension `dim`.
pub fn axis_pairs(dim: usize) -> Result<[usize; 3]> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config("rope dim", format!("{dim} is not a positive even number")));
    }
    let pairs = dim / 2;
    let per = pairs / 3;
    Ok([per + pairs % 3, per, per])
}

fn axis_freqs(n: usize, base: f64) -> Vec<f64> {
    (0..n).map(|i| base.powf(-(i as f64) / n as f64)).collect()
}

/// Rotation table for every token of `grid` with temporal positions shifted by `frame_offset`.
pub fn rope3d_table(grid: &TokenGrid, frame_offset: usize, dim: usize, base: f64) -> Result<RopeTable> {
    let split = axis_pairs(dim)?;
    let freqs: Vec<Vec<f64>> = split.iter().map(|&n| axis_freqs(n, base)).collect();
    let pairs = dim / 2;
    let mut cos = Vec::with_capacity(grid.tokens() * pairs);
    let mut sin = Vec::with_capacity(grid.tokens() * pairs);
    for idx in 0..grid.tokens() {
        let (t, h, w) = grid.unflatten(idx);
        let pos = [(t + frame_offset) as f64, h as f64, w as f64];
        for (axis, fs) in freqs.iter().enumerate() {
            for f in fs {
                let angle = pos[axis] * f;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
    }
    Ok(RopeTable { tokens: grid.tokens(), pairs, cos, sin })
}

pub fn shared_table(grid: &TokenGrid, frame_offset: usize, dim: usize, base: f64) -> Result<Arc<RopeTable>> {
    rope3d_table(grid, frame_offset, dim, base).map(Arc::new)
}

/// Rotates every row of `x: [L, d]` by its grid position.
pub fn rope3d(x: &Tensor, grid: &TokenGrid, base: f64) -> Result<Tensor> {
    let dim = x.cols();
    let table = rope3d_table(grid, 0, dim, base)?;
    Ok(Op::Rope { table: Arc::new(table) }.forward(&[x])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn split_gives_remainder_to_time() {
        assert_eq!(axis_pairs(16).unwrap(), [4, 2, 2]);
        assert_eq!(axis_pairs(12).unwrap(), [2, 2, 2]);
        assert_eq!(axis_pairs(2).unwrap(), [1, 0, 0]);
        assert!(axis_pairs(7).is_err());
    }

    #[test]
    fn origin_is_identity() {
        let grid = TokenGrid::new(1, 1, 1, 8);
        let mut rng = Rng::new(1);
        let x = rng.normal_tensor(&[1, 8], 1.0);
        assert!(rope3d(&x, &grid, DEFAULT_ROPE_BASE).unwrap().bit_eq(&x));
    }

    #[test]
    fn preserves_token_norms() {
        let grid = TokenGrid::new(3, 4, 5, 12);
        let mut rng = Rng::new(2);
        let x = rng.normal_tensor(&[grid.tokens(), 12], 1.0);
        let y = rope3d(&x, &grid, DEFAULT_ROPE_BASE).unwrap();
        for i in 0..grid.tokens() {
            let a: f64 = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let b: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((a - b).abs() <= 1e-6 * a.max(1.0));
        }
    }

    #[test]
    fn inner_product_depends_on_offset_only() {
        // <R_m q, R_n k> must be invariant when both positions shift by the same delta on every axis.
        let grid = TokenGrid::new(6, 6, 6, 10);
        let table = rope3d_table(&grid, 0, 10, DEFAULT_ROPE_BASE).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let q = rng.normal_tensor(&[10], 1.0);
            let k = rng.normal_tensor(&[10], 1.0);
            let (m, n) = ([0, 1, 2], [2, 0, 1]);
            let delta = [rng.below(3), rng.below(3), rng.below(3)];
            let ip = |a: [usize; 3], b: [usize; 3]| {
                let mut qa = q.data().to_vec();
                let mut kb = k.data().to_vec();
                table.rotate(grid.flatten(a[0], a[1], a[2]), &mut qa, false);
                table.rotate(grid.flatten(b[0], b[1], b[2]), &mut kb, false);
                qa.iter().zip(&kb).map(|(x, y)| x * y).sum::<f64>()
            };
            let shifted = |p: [usize; 3]| [p[0] + delta[0], p[1] + delta[1], p[2] + delta[2]];
            assert!((ip(m, n) - ip(shifted(m), shifted(n))).abs() < 1e-6);
        }
    }

    #[test]
    fn frame_offset_matches_larger_grid() {
        let big = TokenGrid::new(5, 2, 2, 8);
        let chunk = TokenGrid::new(2, 2, 2, 8);
        let full = rope3d_table(&big, 0, 8, 100.0).unwrap();
        let part = rope3d_table(&chunk, 3, 8, 100.0).unwrap();
        let start = 3 * 4 * full.pairs;
        assert_eq!(&full.cos[start..], &part.cos[..]);
        assert_eq!(&full.sin[start..], &part.sin[..]);
    }
}
