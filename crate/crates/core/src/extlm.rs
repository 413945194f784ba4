//! External language model for shallow fusion: a recurrent predictor of its
//! own followed by the LM-mode head (prediction projection, tanh, label head).
//! It shares the ASR model's topology but never its parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::joiner::LabelHeadIds;
use crate::loss::cross_entropy_raw;
use crate::ops::{affine, log_softmax, DEFAULT_LN_EPS};
use crate::params::{Builder, Gradients, Linear, ParamStore};
use crate::predictor::{PredictorIds, PredictorState};
use crate::tensor::Tensor;
use crate::train::{epoch_order, Adam, AdamConfig};

pub const EXTLM_CONFIG_TENSOR: &str = "meta.extlm_config";

#[derive(Clone, Debug, PartialEq)]
pub struct ExtLmConfig {
    /// Vocabulary including EOS.
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dim: usize,
    pub ff_expansion: usize,
    pub ln_eps: f64,
}

impl Default for ExtLmConfig {
    fn default() -> Self {
        Self { vocab: 6, embed: 32, hidden: 32, layers: 1, dim: 32, ff_expansion: 2, ln_eps: DEFAULT_LN_EPS }
    }
}

impl ExtLmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || [self.embed, self.hidden, self.layers, self.dim, self.ff_expansion].contains(&0) {
            return Err(Error::Config("external LM dimensions must be positive and vocab at least 2".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// `ln_eps` is stored as its reciprocal, which survives the 32-bit round
    /// trip exactly for the usual powers of ten.
    pub(crate) fn to_values(&self) -> Vec<f64> {
        let mut v: Vec<f64> =
            [self.vocab, self.embed, self.hidden, self.layers, self.dim, self.ff_expansion].iter().map(|&x| x as f64).collect();
        v.push(1.0 / self.ln_eps);
        v
    }

    pub(crate) fn from_values(v: &[f64]) -> Result<Self> {
        if v.len() != 7 || v[..6].iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
            return Err(Error::Format("malformed external LM configuration tensor".into()));
        }
        let cfg = Self {
            vocab: v[0] as usize,
            embed: v[1] as usize,
            hidden: v[2] as usize,
            layers: v[3] as usize,
            dim: v[4] as usize,
            ff_expansion: v[5] as usize,
            ln_eps: 1.0 / v[6],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct ExternalLm {
    config: ExtLmConfig,
    store: ParamStore,
    predictor: PredictorIds,
    pred: Linear,
    head: LabelHeadIds,
}

/// Predictor state of a prefix and the LM's next-token log-distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtLmState {
    pred: PredictorState,
    log_probs: Vec<f64>,
}

impl ExtLmState {
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }
}

impl ExternalLm {
    /// Random recurrent weights and a zero label layer, so the initial
    /// distribution is exactly uniform.
    pub fn new(config: ExtLmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let predictor = PredictorIds::build(&mut Builder::new(&mut store, &mut rng, "extlm.pred"), c.vocab, c.embed, c.hidden, c.layers)?;
        let mut b = Builder::new(&mut store, &mut rng, "extlm.head");
        let pred = b.linear("pred", c.dim, c.hidden, true)?;
        let head = LabelHeadIds::build(&mut b, c.dim, c.vocab, c.ff_expansion, c.ln_eps)?;
        store.get_mut(head.label.weight).data_mut().fill(0.0);
        Ok(Self { config, store, predictor, pred, head })
    }

    pub fn from_store(config: ExtLmConfig, store: &ParamStore) -> Result<Self> {
        let mut lm = Self::new(config, 0)?;
        lm.store.assign_from(store)?;
        Ok(lm)
    }

    pub fn config(&self) -> &ExtLmConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn distribution(&self, h: &[f64]) -> Result<Vec<f64>> {
        let bias = self.store.get(self.pred.bias.expect("bias")).data();
        let hp: Vec<f64> = affine(h, self.store.get(self.pred.weight), bias)?.iter().map(|v| v.tanh()).collect();
        log_softmax(&self.head.logits(&self.store, &hp)?)
    }

    pub fn initial(&self) -> Result<ExtLmState> {
        let (h, pred) = self.predictor.step(&self.store, None, &self.predictor.initial_state())?;
        Ok(ExtLmState { log_probs: self.distribution(&h)?, pred })
    }

    pub fn extend(&self, state: &ExtLmState, token: usize) -> Result<ExtLmState> {
        let (h, pred) = self.predictor.step(&self.store, Some(token), &state.pred)?;
        Ok(ExtLmState { log_probs: self.distribution(&h)?, pred })
    }

    pub fn state_for(&self, prefix: &[usize]) -> Result<ExtLmState> {
        let mut s = self.initial()?;
        for &t in prefix {
            s = self.extend(&s, t)?;
        }
        Ok(s)
    }

    /// `(U+1)×K` next-token log-probabilities for `[start, y₁…y_U]`.
    pub fn log_probs_graph(&self, g: &mut Graph, y: &[usize]) -> Result<Var> {
        let h = self.predictor.forward(g, y)?;
        let hp = g.linear(h, &self.pred)?;
        let hp = g.tanh(hp);
        let l = self.head.logits_graph(g, hp)?;
        g.log_softmax(l)
    }

    /// Summed cross-entropy of `y` followed by EOS, and its gradient.
    pub fn sequence_loss(&self, y: &[usize]) -> Result<(f64, Gradients)> {
        let eos = self.config.vocab - 1;
        if let Some(v) = y.iter().find(|&&v| v >= eos) {
            return Err(Error::InvalidInput(format!("token {v} is EOS or out of range")));
        }
        let mut targets = y.to_vec();
        targets.push(eos);
        let mut g = Graph::new(&self.store);
        let lp = self.log_probs_graph(&mut g, y)?;
        let (value, grad) = cross_entropy_raw(g.value(lp).data(), self.config.vocab, &targets);
        let dims = g.value(lp).dims().to_vec();
        let node = g.precomputed(lp, value, Tensor::new(dims, grad)?)?;
        Ok((value, g.backward(node)?))
    }

    /// Per-token perplexity (EOS included) over `transcripts`.
    pub fn perplexity(&self, transcripts: &[Vec<usize>]) -> Result<f64> {
        let (mut nll, mut n) = (0.0, 0usize);
        for y in transcripts {
            let mut s = self.initial()?;
            for &t in y {
                nll -= s.log_probs[t];
                s = self.extend(&s, t)?;
            }
            nll -= s.log_probs[self.config.vocab - 1];
            n += y.len() + 1;
        }
        Ok((nll / n.max(1) as f64).exp())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtLmTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ExtLmTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 8, adam: AdamConfig { lr: 3e-3, warmup_steps: 50, ..AdamConfig::default() }, seed: 0 }
    }
}

/// Trains on token sequences; returns the mean per-token cross-entropy of
/// each epoch, which is also handed to `on_epoch`.
pub fn train_extlm(
    lm: &mut ExternalLm,
    transcripts: &[Vec<usize>],
    cfg: &ExtLmTrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &ExternalLm) -> Result<()>,
) -> Result<Vec<f64>> {
    if transcripts.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("external LM training needs data, epochs and a batch size".into()));
    }
    let mut opt = Adam::new(&lm.store, cfg.adam.clone());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut nll, mut tokens) = (0.0, 0usize);
        for batch in epoch_order(transcripts.len(), cfg.seed, epoch).chunks(cfg.batch_size) {
            let mut grads = Gradients::zeros_like(&lm.store);
            for &i in batch {
                let (v, g) = lm.sequence_loss(&transcripts[i])?;
                grads.add_scaled(&g, 1.0 / batch.len() as f64);
                nll += v;
                tokens += transcripts[i].len() + 1;
            }
            opt.update(&mut lm.store, &grads)?;
        }
        let ce = nll / tokens as f64;
        log::info!("extlm epoch {epoch}: cross-entropy {ce:.4}");
        curve.push(ce);
        on_epoch(epoch, ce, lm)?;
    }
    Ok(curve)
}
