//! Binary visibility masks over the token sequence.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Number of visible tokens, `floor(N·(1-ρ))`.
///
/// A tiny epsilon absorbs representation error in `1-ρ` (e.g. `1-0.9`).
pub fn visible_count(tokens: usize, ratio: f64) -> usize {
    ((tokens as f64) * (1.0 - ratio) + 1e-9).floor() as usize
}

/// Per-sample visible and masked token indices, both ascending.
///
/// In bit form `1` marks a masked token and `0` a visible one.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisibilityMask {
    tokens: usize,
    visible: Vec<Vec<usize>>,
    masked: Vec<Vec<usize>>,
}

impl VisibilityMask {
    /// Builds a mask from per-sample visible sets. Every sample must keep the
    /// same number of visible tokens.
    pub fn from_visible(tokens: usize, mut visible: Vec<Vec<usize>>) -> Result<Self> {
        let k = visible.first().map_or(0, |v| v.len());
        if visible.iter().any(|v| v.len() != k) {
            return Err(Error::RaggedMask(visible.iter().map(|v| v.len()).collect()));
        }
        let mut masked = Vec::with_capacity(visible.len());
        for v in &mut visible {
            v.sort_unstable();
            v.dedup();
            if v.len() != k || v.iter().any(|&i| i >= tokens) {
                return Err(Error::invalid("visible indices must be distinct and in range"));
            }
            let mut flags = vec![true; tokens];
            for &i in v.iter() {
                flags[i] = false;
            }
            masked.push((0..tokens).filter(|&i| flags[i]).collect());
        }
        Ok(Self {
            tokens,
            visible,
            masked,
        })
    }

    /// From `[B][N]` bits (`1` = masked).
    pub fn from_bits(bits: &[Vec<u8>]) -> Result<Self> {
        let tokens = bits.first().map_or(0, |b| b.len());
        if bits.iter().any(|b| b.len() != tokens) {
            return Err(Error::invalid("mask rows differ in length"));
        }
        let visible = bits
            .iter()
            .map(|row| (0..tokens).filter(|&i| row[i] == 0).collect())
            .collect();
        Self::from_visible(tokens, visible)
    }

    /// Nothing masked.
    pub fn all_visible(batch: usize, tokens: usize) -> Self {
        Self {
            tokens,
            visible: vec![(0..tokens).collect(); batch],
            masked: vec![vec![]; batch],
        }
    }

    pub fn batch(&self) -> usize {
        self.visible.len()
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn visible(&self) -> &[Vec<usize>] {
        &self.visible
    }

    pub fn masked(&self) -> &[Vec<usize>] {
        &self.masked
    }

    pub fn visible_per_sample(&self) -> usize {
        self.visible.first().map_or(0, |v| v.len())
    }

    pub fn masked_per_sample(&self) -> usize {
        self.tokens - self.visible_per_sample()
    }

    pub fn is_masked(&self, b: usize, i: usize) -> bool {
        self.visible[b].binary_search(&i).is_err()
    }

    pub fn bits(&self) -> Vec<Vec<u8>> {
        (0..self.batch())
            .map(|b| (0..self.tokens).map(|i| self.is_masked(b, i) as u8).collect())
            .collect()
    }

    /// `[B, N]` tensor with `1` at visible positions.
    pub fn visible_indicator<F: Real>(&self) -> Tensor<F> {
        let n = self.tokens;
        let mut t = Tensor::zeros(&[self.batch(), n]);
        for (b, v) in self.visible.iter().enumerate() {
            for &i in v {
                t.data_mut()[b * n + i] = F::one();
            }
        }
        t
    }

    /// Observed masked fraction over the batch.
    pub fn observed_ratio(&self) -> f64 {
        if self.tokens == 0 {
            return 0.0;
        }
        self.masked_per_sample() as f64 / self.tokens as f64
    }
}
