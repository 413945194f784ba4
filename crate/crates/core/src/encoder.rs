//! Frame-stacking front end and a stack of pre-norm self-attention blocks,
//! usable with full context or chunk-limited context.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::Activation;
use crate::params::{Builder, FeedForwardIds, LayerNormIds, Linear};
use crate::tensor::Tensor;

/// Chunking of post-subsampling frames for streaming encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkConfig {
    pub chunk_len: usize,
    pub history_chunks: usize,
}

impl ChunkConfig {
    pub fn new(chunk_len: usize, history_chunks: usize) -> Result<Self> {
        if chunk_len == 0 {
            return Err(Error::Config("chunk_len must be at least 1".into()));
        }
        Ok(Self { chunk_len, history_chunks })
    }

    pub fn chunk_of(&self, t: usize) -> usize {
        t / self.chunk_len
    }

    /// One past the last frame of the chunk holding `t`, clamped to `t_len`.
    pub fn chunk_end(&self, t: usize, t_len: usize) -> usize {
        ((self.chunk_of(t) + 1) * self.chunk_len).min(t_len)
    }
}

/// Row-major `T′×T′` mask; frame `t` sees frame `s` iff
/// `chunk(t) − H ≤ chunk(s) ≤ chunk(t)`.
pub fn chunk_attention_mask(t_len: usize, cfg: &ChunkConfig) -> Vec<bool> {
    let mut m = vec![false; t_len * t_len];
    for t in 0..t_len {
        let ct = cfg.chunk_of(t);
        for s in 0..t_len {
            let cs = cfg.chunk_of(s);
            m[t * t_len + s] = cs <= ct && cs + cfg.history_chunks >= ct;
        }
    }
    m
}

/// Stacks `s` consecutive frames into one; the tail is zero-padded.
pub fn subsample(feats: &Tensor, s: usize) -> Result<Tensor> {
    if s == 0 {
        return Err(Error::Config("subsampling factor must be at least 1".into()));
    }
    let (t_len, f) = (feats.rows(), feats.cols());
    let out_len = t_len.div_ceil(s);
    let mut out = vec![0.0; out_len * s * f];
    out[..t_len * f].copy_from_slice(feats.data());
    Tensor::matrix(out_len, s * f, out)
}

pub fn position_encoding(t_len: usize, dim: usize) -> Tensor {
    let mut pe = vec![0.0; t_len * dim];
    for t in 0..t_len {
        for i in 0..dim {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / dim as f64);
            let a = t as f64 * freq;
            pe[t * dim + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::matrix(t_len, dim, pe).expect("positive dims")
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub ln_att: LayerNormIds,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln_ff: LayerNormIds,
    pub ff: FeedForwardIds,
}

#[derive(Clone, Debug)]
pub struct EncoderIds {
    pub input: Linear,
    pub blocks: Vec<BlockIds>,
    pub subsample: usize,
    pub heads: usize,
    pub dim: usize,
}

impl EncoderIds {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        feat_dim: usize,
        subsample: usize,
        dim: usize,
        blocks: usize,
        heads: usize,
        expansion: usize,
        eps: f64,
    ) -> Result<Self> {
        let input = b.linear("input", dim, feat_dim * subsample, true)?;
        let mut out = Vec::with_capacity(blocks);
        for i in 0..blocks {
            out.push(BlockIds {
                ln_att: b.layer_norm(&format!("block{i}.ln_att"), dim, eps)?,
                query: b.linear(&format!("block{i}.query"), dim, dim, false)?,
                key: b.linear(&format!("block{i}.key"), dim, dim, false)?,
                value: b.linear(&format!("block{i}.value"), dim, dim, false)?,
                out: b.linear(&format!("block{i}.out"), dim, dim, true)?,
                ln_ff: b.layer_norm(&format!("block{i}.ln_ff"), dim, eps)?,
                ff: b.feed_forward(&format!("block{i}.ff"), dim, expansion, Activation::Gelu)?,
            });
        }
        Ok(Self { input, blocks: out, subsample, heads, dim })
    }

    /// Encodes `feats` (`T×F`) to `T′×D′`. With `chunk = None` every frame
    /// attends to every other; otherwise each block applies the chunk mask.
    pub fn forward(&self, g: &mut Graph, feats: &Tensor, chunk: Option<&ChunkConfig>) -> Result<Var> {
        if !feats.all_finite() {
            return Err(Error::InvalidInput("non-finite acoustic features".into()));
        }
        let stacked = subsample(feats, self.subsample)?;
        let t_len = stacked.rows();
        let x = g.constant(stacked);
        let h = g.linear(x, &self.input)?;
        let pe = g.constant(position_encoding(t_len, self.dim));
        let mut h = g.add(h, pe)?;
        let mask = chunk.map(|c| chunk_attention_mask(t_len, c));
        for blk in &self.blocks {
            let a = g.layer_norm(h, &blk.ln_att)?;
            let q = g.linear(a, &blk.query)?;
            let k = g.linear(a, &blk.key)?;
            let v = g.linear(a, &blk.value)?;
            let att = g.attention(q, k, v, mask.as_deref(), self.heads)?;
            let o = g.linear(att, &blk.out)?;
            h = g.add(h, o)?;
            let f = g.layer_norm(h, &blk.ln_ff)?;
            let f = g.feed_forward(f, &blk.ff)?;
            h = g.add(h, f)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_examples() {
        let f = Tensor::matrix(4, 2, (0..8).map(f64::from).collect()).unwrap();
        let s = subsample(&f, 4).unwrap();
        assert_eq!(s.dims(), &[1, 8]);
        assert_eq!(s.data(), f.data());

        let f = Tensor::matrix(5, 2, (1..=10).map(f64::from).collect()).unwrap();
        let s = subsample(&f, 4).unwrap();
        assert_eq!(s.dims(), &[2, 8]);
        assert_eq!(s.row(1), &[9.0, 10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        assert_eq!(subsample(&f, 1).unwrap(), f);
    }

    #[test]
    fn chunk_mask_examples() {
        let all = chunk_attention_mask(5, &ChunkConfig::new(5, 0).unwrap());
        assert!(all.iter().all(|&b| b));

        let m = chunk_attention_mask(4, &ChunkConfig::new(2, 0).unwrap());
        #[rustfmt::skip]
        let expected = [
            true, true, false, false,
            true, true, false, false,
            false, false, true, true,
            false, false, true, true,
        ];
        assert_eq!(m, expected);

        let m = chunk_attention_mask(6, &ChunkConfig::new(2, 1).unwrap());
        assert_eq!(&m[4 * 6..5 * 6], &[false, false, true, true, true, true]);
        assert_eq!(&m[2 * 6..3 * 6], &[true, true, true, true, false, false]);
        assert_eq!(&m[0..6], &[true, true, false, false, false, false]);
    }

    #[test]
    fn chunk_helpers() {
        let c = ChunkConfig::new(20, 1).unwrap();
        assert_eq!(c.chunk_of(39), 1);
        assert_eq!(c.chunk_end(25, 40), 40);
        assert_eq!(c.chunk_end(5, 12), 12);
        assert!(ChunkConfig::new(0, 0).is_err());
    }
}
