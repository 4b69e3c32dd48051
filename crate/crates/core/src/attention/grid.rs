use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Grid3;

/// Latent video tokens laid out as `(t, h, w)` row-major, `channels` per token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl TokenGrid {
    pub fn new(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self { frames, height, width, channels }
    }

    /// Sequence length `T * H * W`.
    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn flatten(&self, t: usize, h: usize, w: usize) -> usize {
        debug_assert!(t < self.frames && h < self.height && w < self.width);
        (t * self.height + h) * self.width + w
    }

    pub fn unflatten(&self, index: usize) -> (usize, usize, usize) {
        let w = index % self.width;
        let h = (index / self.width) % self.height;
        let t = index / (self.width * self.height);
        (t, h, w)
    }

    pub fn grid3(&self) -> Grid3 {
        Grid3 { t: self.frames, h: self.height, w: self.width }
    }

    pub fn with_frames(&self, frames: usize) -> Self {
        Self { frames, ..*self }
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }

    /// Spatially strided grid; the temporal axis is kept.
    pub fn downsampled(&self, stride: usize) -> Result<TokenGrid> {
        if stride == 0 || !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return Err(Error::config(
                "stride",
                format!("{}x{} grid is not divisible by stride {stride}", self.height, self.width),
            ));
        }
        Ok(Self { height: self.height / stride, width: self.width / stride, ..*self })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flatten_unflatten_inverse(t in 1usize..5, h in 1usize..6, w in 1usize..6) {
            let g = TokenGrid::new(t, h, w, 1);
            for i in 0..g.tokens() {
                let (a, b, c) = g.unflatten(i);
                prop_assert_eq!(g.flatten(a, b, c), i);
            }
            prop_assert_eq!(g.tokens(), t * h * w);
        }
    }

    #[test]
    fn downsample_divisibility() {
        let g = TokenGrid::new(2, 4, 6, 8);
        assert_eq!(g.downsampled(2).unwrap(), TokenGrid::new(2, 2, 3, 8));
        assert!(g.downsampled(4).is_err());
    }
}
