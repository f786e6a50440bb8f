//! Hyper-encoder: latent image to a grid of code-dimension vectors.

use perco_tensor::{Elem, ParamStore, Rng, Session, Tensor};

use super::layers::{Conv, Norm, ResBlock};
use crate::error::{mismatch, Result};

#[derive(Clone, Debug)]
pub struct HyperEncoder {
    stem: Conv,
    /// Residual blocks per resolution level, finest first; a stride-2
    /// convolution sits between consecutive levels.
    levels: Vec<Vec<ResBlock>>,
    downs: Vec<Conv>,
    norm: Norm,
    out: Conv,
    pub in_channels: usize,
    pub in_side: usize,
    pub grid: usize,
    pub out_channels: usize,
}

/// Split `blocks` over `levels`, the remainder going to the coarsest ones.
pub fn distribute_blocks(blocks: usize, levels: usize) -> Vec<usize> {
    let base = blocks / levels;
    let extra = blocks % levels;
    (0..levels).map(|l| base + usize::from(l >= levels - extra)).collect()
}

impl HyperEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Elem>(
        store: &mut ParamStore<T>,
        in_channels: usize,
        in_side: usize,
        grid: usize,
        width: usize,
        blocks: usize,
        out_channels: usize,
        max_groups: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if grid == 0 || in_side % grid != 0 || !(in_side / grid).is_power_of_two() {
            return mismatch(format!("side {in_side} is not a power-of-two multiple of grid {grid}"));
        }
        let f = in_side / grid;
        let s0 = f.min(4);
        let stem = Conv::new(store, "he.stem", in_channels, width, s0, s0, 0, rng)?;
        let n_down = (f / s0).trailing_zeros() as usize;
        let counts = distribute_blocks(blocks, n_down + 1);
        let mut levels = Vec::new();
        let mut downs = Vec::new();
        for (l, &n) in counts.iter().enumerate() {
            let blocks = (0..n)
                .map(|i| ResBlock::new(store, &format!("he.l{l}.b{i}"), width, width, None, max_groups, rng))
                .collect::<Result<Vec<_>>>()?;
            levels.push(blocks);
            if l < n_down {
                downs.push(Conv::new(store, &format!("he.down{l}"), width, width, 3, 2, 1, rng)?);
            }
        }
        let norm = Norm::new(store, "he.norm", width, max_groups)?;
        let out = Conv::new(store, "he.out", width, out_channels, 1, 1, 0, rng)?;
        Ok(HyperEncoder {
            stem,
            levels,
            downs,
            norm,
            out,
            in_channels,
            in_side,
            grid,
            out_channels,
        })
    }

    /// `[B, C, S, S]` → `[B, out_channels, grid, grid]`.
    pub fn forward<T: Elem>(&self, s: &Session<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 4 || x.dim(1) != self.in_channels || x.dim(2) != self.in_side || x.dim(3) != self.in_side {
            return mismatch(format!(
                "hyper-encoder expects [B, {}, {}, {}], got {:?}",
                self.in_channels,
                self.in_side,
                self.in_side,
                x.shape()
            ));
        }
        let mut h = self.stem.forward(s, x)?;
        for (l, blocks) in self.levels.iter().enumerate() {
            for b in blocks {
                h = b.forward(s, &h, None)?;
            }
            if let Some(d) = self.downs.get(l) {
                h = d.forward(s, &h)?;
            }
        }
        self.out.forward(s, &self.norm.forward(s, &h)?.silu())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extra_blocks_go_to_coarse_levels() {
        assert_eq!(distribute_blocks(9, 4), vec![2, 2, 2, 3]);
        assert_eq!(distribute_blocks(9, 3), vec![3, 3, 3]);
        assert_eq!(distribute_blocks(9, 2), vec![4, 5]);
        assert_eq!(distribute_blocks(9, 1), vec![9]);
    }
}
