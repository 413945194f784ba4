//! The shared parameter set: encoder, predictor and multi-mode joiner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{ChunkConfig, EncoderIds};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::joiner::{Joiner, JoinerIds};
use crate::ops::DEFAULT_LN_EPS;
use crate::params::{Builder, ParamStore};
use crate::predictor::{PredictorIds, PredictorState};
use crate::tensor::Tensor;

/// Name of the rank-1 tensor that stores the architecture inside a checkpoint.
pub const CONFIG_TENSOR: &str = "meta.model_config";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    /// Label vocabulary including EOS (the last id).
    pub vocab: usize,
    pub subsample: usize,
    pub enc_dim: usize,
    pub enc_blocks: usize,
    pub enc_heads: usize,
    pub pred_embed: usize,
    pub pred_dim: usize,
    pub pred_layers: usize,
    pub joiner_dim: usize,
    pub joiner_heads: usize,
    pub ff_expansion: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 8,
            vocab: 6,
            subsample: 2,
            enc_dim: 64,
            enc_blocks: 2,
            enc_heads: 4,
            pred_embed: 64,
            pred_dim: 64,
            pred_layers: 1,
            joiner_dim: 64,
            joiner_heads: 4,
            ff_expansion: 4,
            ln_eps: DEFAULT_LN_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feat_dim", self.feat_dim),
            ("subsample", self.subsample),
            ("enc_dim", self.enc_dim),
            ("enc_heads", self.enc_heads),
            ("pred_embed", self.pred_embed),
            ("pred_dim", self.pred_dim),
            ("pred_layers", self.pred_layers),
            ("joiner_dim", self.joiner_dim),
            ("joiner_heads", self.joiner_heads),
            ("ff_expansion", self.ff_expansion),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab < 2 {
            return Err(Error::Config("vocab must hold at least one label and EOS".into()));
        }
        if !self.enc_dim.is_multiple_of(self.enc_heads) {
            return Err(Error::Config(format!(
                "enc_dim {} not divisible by enc_heads {}",
                self.enc_dim, self.enc_heads
            )));
        }
        if !self.joiner_dim.is_multiple_of(self.joiner_heads) {
            return Err(Error::Config(format!(
                "joiner_dim {} not divisible by joiner_heads {}",
                self.joiner_dim, self.joiner_heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn eos(&self) -> usize {
        self.vocab - 1
    }

    /// `ln_eps` is stored as its reciprocal, which survives the 32-bit round
    /// trip exactly for the usual powers of ten.
    pub(crate) fn to_values(&self) -> Vec<f64> {
        [
            self.feat_dim,
            self.vocab,
            self.subsample,
            self.enc_dim,
            self.enc_blocks,
            self.enc_heads,
            self.pred_embed,
            self.pred_dim,
            self.pred_layers,
            self.joiner_dim,
            self.joiner_heads,
            self.ff_expansion,
        ]
        .iter()
        .map(|&v| v as f64)
        .chain(std::iter::once(1.0 / self.ln_eps))
        .collect()
    }

    pub(crate) fn from_values(v: &[f64]) -> Result<Self> {
        if v.len() != 13 || v[..12].iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
            return Err(Error::Format("malformed model configuration tensor".into()));
        }
        let u = |i: usize| v[i] as usize;
        let cfg = Self {
            feat_dim: u(0),
            vocab: u(1),
            subsample: u(2),
            enc_dim: u(3),
            enc_blocks: u(4),
            enc_heads: u(5),
            pred_embed: u(6),
            pred_dim: u(7),
            pred_layers: u(8),
            joiner_dim: u(9),
            joiner_heads: u(10),
            ff_expansion: u(11),
            ln_eps: 1.0 / v[12],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One parameter set serving every joiner mode in both offline and streaming
/// operation.
#[derive(Clone, Debug)]
pub struct AioModel {
    config: ModelConfig,
    store: ParamStore,
    pub encoder: EncoderIds,
    pub predictor: PredictorIds,
    pub joiner: JoinerIds,
}

impl AioModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = EncoderIds::build(
            &mut Builder::new(&mut store, &mut rng, "enc"),
            c.feat_dim,
            c.subsample,
            c.enc_dim,
            c.enc_blocks,
            c.enc_heads,
            c.ff_expansion,
            c.ln_eps,
        )?;
        let predictor = PredictorIds::build(
            &mut Builder::new(&mut store, &mut rng, "pred"),
            c.vocab,
            c.pred_embed,
            c.pred_dim,
            c.pred_layers,
        )?;
        let joiner = JoinerIds::build(
            &mut Builder::new(&mut store, &mut rng, "joiner"),
            c.enc_dim,
            c.pred_dim,
            c.joiner_dim,
            c.vocab,
            c.joiner_heads,
            c.ff_expansion,
            c.ln_eps,
        )?;
        Ok(Self { config, store, encoder, predictor, joiner })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_store(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.store.assign_from(store)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn joiner(&self) -> Joiner<'_> {
        Joiner::new(&self.store, &self.joiner)
    }

    fn check_feats(&self, x: &Tensor) -> Result<()> {
        if x.dims().len() != 2 || x.cols() != self.config.feat_dim {
            return Err(Error::InvalidInput(format!(
                "features {:?} do not have {} columns",
                x.dims(),
                self.config.feat_dim
            )));
        }
        Ok(())
    }

    /// Full-context encoding `T′×D′`.
    pub fn encode_offline(&self, x: &Tensor) -> Result<Tensor> {
        self.check_feats(x)?;
        let mut g = Graph::new(&self.store);
        let h = self.encoder.forward(&mut g, x, None)?;
        Ok(g.value(h).clone())
    }

    /// Chunk-limited encoding `T′×D′`.
    pub fn encode_streaming(&self, x: &Tensor, chunk: &ChunkConfig) -> Result<Tensor> {
        self.check_feats(x)?;
        let mut g = Graph::new(&self.store);
        let h = self.encoder.forward(&mut g, x, Some(chunk))?;
        Ok(g.value(h).clone())
    }

    /// Predictor outputs `(U+1)×D″` for `[start, y₁…y_U]`.
    pub fn predictor_outputs(&self, y: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let h = self.predictor.forward(&mut g, y)?;
        Ok(g.value(h).clone())
    }

    pub fn initial_state(&self) -> PredictorState {
        self.predictor.initial_state()
    }

    /// One incremental predictor step.
    pub fn predict(&self, prev: Option<usize>, state: &PredictorState) -> Result<(Vec<f64>, PredictorState)> {
        self.predictor.step(&self.store, prev, state)
    }

    /// Number of post-subsampling frames for `t` input frames.
    pub fn frames_after_subsampling(&self, t: usize) -> usize {
        t.div_ceil(self.config.subsample)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            feat_dim: 3,
            vocab: 4,
            subsample: 2,
            enc_dim: 8,
            enc_blocks: 2,
            enc_heads: 2,
            pred_embed: 6,
            pred_dim: 8,
            pred_layers: 1,
            joiner_dim: 8,
            joiner_heads: 2,
            ff_expansion: 2,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn config_round_trips_through_values() {
        let c = small();
        assert_eq!(ModelConfig::from_values(&c.to_values()).unwrap(), c);
        let bad = ModelConfig { joiner_heads: 3, ..small() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(matches!(AioModel::new(bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_blocks_leave_projected_input() {
        let m = AioModel::new(small(), 1).unwrap();
        let mut zeroed = m.clone();
        let names: Vec<_> = zeroed.store().iter().map(|(n, _)| n.to_string()).collect();
        for n in names.iter().filter(|n| n.starts_with("enc.block")) {
            let id = zeroed.store().id_of(n).unwrap();
            zeroed.store_mut().get_mut(id).data_mut().fill(0.0);
        }
        let x = Tensor::matrix(5, 3, (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let out = zeroed.encode_offline(&x).unwrap();
        let stacked = crate::encoder::subsample(&x, 2).unwrap();
        let input = &m.encoder.input;
        let proj = crate::tensor::matmul_nt(&stacked, m.store().get(input.weight)).unwrap();
        let pe = crate::encoder::position_encoding(3, 8);
        for r in 0..3 {
            for c in 0..8 {
                let expected = proj.row(r)[c] + m.store().get(input.bias.unwrap()).data()[c] + pe.row(r)[c];
                assert_eq!(out.row(r)[c], expected);
            }
        }
    }

    #[test]
    fn offline_encoder_is_full_context() {
        let m = AioModel::new(small(), 2).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(m.encode_offline(&x).unwrap().dims(), &[1, 8]);

        let x = Tensor::matrix(8, 3, (0..24).map(|i| (i as f64 * 0.71).cos()).collect()).unwrap();
        let base = m.encode_offline(&x).unwrap();
        let mut swapped = x.clone();
        let (r0, r7) = (x.row(0).to_vec(), x.row(7).to_vec());
        swapped.row_mut(0).copy_from_slice(&r7);
        swapped.row_mut(7).copy_from_slice(&r0);
        let out = m.encode_offline(&swapped).unwrap();
        assert_ne!(out.row(0), base.row(0));
        assert_ne!(out.row(3), base.row(3));
    }

    #[test]
    fn streaming_degenerates_and_is_causal() {
        let m = AioModel::new(small(), 3).unwrap();
        let x = Tensor::matrix(12, 3, (0..36).map(|i| (i as f64 * 0.13).sin()).collect()).unwrap();
        let off = m.encode_offline(&x).unwrap();
        for h in [0, 2] {
            let c = ChunkConfig::new(6, h).unwrap();
            assert_eq!(m.encode_streaming(&x, &c).unwrap(), off);
        }
        let c = ChunkConfig::new(2, 1).unwrap();
        let base = m.encode_streaming(&x, &c).unwrap();
        let mut y = x.clone();
        for r in 8..12 {
            y.row_mut(r).fill(3.0);
        }
        let pert = m.encode_streaming(&y, &c).unwrap();
        // input frames 8.. map to subsampled frames 4.., i.e. chunk 2
        assert_eq!(&pert.data()[..4 * 8], &base.data()[..4 * 8]);
        assert_ne!(&pert.data()[4 * 8..], &base.data()[4 * 8..]);
    }

    #[test]
    fn forty_frames_make_two_chunks() {
        let c = ChunkConfig::new(20, 0).unwrap();
        let mask = crate::encoder::chunk_attention_mask(40, &c);
        let distinct: std::collections::BTreeSet<Vec<bool>> =
            (0..40).map(|t| mask[t * 40..(t + 1) * 40].to_vec()).collect();
        assert_eq!(distinct.len(), 2);
    }
}
