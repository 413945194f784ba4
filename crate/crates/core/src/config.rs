//! Plain-text run configuration: one `key = value` per line, `#` starts a
//! comment. Keys are grouped by prefix (`corpus.`, `model.`, `train.`,
//! `decode.`, `extlm.`). The model and external LM take their vocabulary and
//! feature width from the corpus section.

use std::collections::HashSet;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::CorpusConfig;
use crate::decode::{DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::extlm::{ExtLmConfig, ExtLmTrainConfig};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "AIO_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `decode.chunk` is derived from `decode_streaming` and the training
    /// chunk settings.
    pub decode: DecodeConfig,
    pub decode_streaming: bool,
    pub extlm: ExtLmConfig,
    pub extlm_train: ExtLmTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            decode_streaming: false,
            extlm: ExtLmConfig::default(),
            extlm_train: ExtLmTrainConfig::default(),
        };
        c.sync();
        c
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Parses and validates; keys left out keep their defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut c = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            c.set(key, value)?;
        }
        c.sync();
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "corpus.vocab" => self.corpus.vocab = parse(k, v)?,
            "corpus.feat_dim" => self.corpus.feat_dim = parse(k, v)?,
            "corpus.min_tokens" => self.corpus.min_tokens = parse(k, v)?,
            "corpus.max_tokens" => self.corpus.max_tokens = parse(k, v)?,
            "corpus.min_duration" => self.corpus.min_duration = parse(k, v)?,
            "corpus.max_duration" => self.corpus.max_duration = parse(k, v)?,
            "corpus.noise" => self.corpus.noise = parse(k, v)?,
            "corpus.successors" => self.corpus.successors = parse(k, v)?,
            "corpus.n_train" => self.corpus.n_train = parse(k, v)?,
            "corpus.n_dev" => self.corpus.n_dev = parse(k, v)?,
            "corpus.n_test" => self.corpus.n_test = parse(k, v)?,
            "corpus.seed" => self.corpus.seed = parse(k, v)?,

            "model.subsample" => self.model.subsample = parse(k, v)?,
            "model.enc_dim" => self.model.enc_dim = parse(k, v)?,
            "model.enc_blocks" => self.model.enc_blocks = parse(k, v)?,
            "model.enc_heads" => self.model.enc_heads = parse(k, v)?,
            "model.pred_embed" => self.model.pred_embed = parse(k, v)?,
            "model.pred_dim" => self.model.pred_dim = parse(k, v)?,
            "model.pred_layers" => self.model.pred_layers = parse(k, v)?,
            "model.joiner_dim" => self.model.joiner_dim = parse(k, v)?,
            "model.joiner_heads" => self.model.joiner_heads = parse(k, v)?,
            "model.ff_expansion" => self.model.ff_expansion = parse(k, v)?,
            "model.ln_eps" => self.model.ln_eps = parse(k, v)?,

            "train.epochs" => self.train.epochs = parse(k, v)?,
            "train.batch_size" => self.train.batch_size = parse(k, v)?,
            "train.lr" => self.train.adam.lr = parse(k, v)?,
            "train.warmup_steps" => self.train.adam.warmup_steps = parse(k, v)?,
            "train.beta1" => self.train.adam.beta1 = parse(k, v)?,
            "train.beta2" => self.train.adam.beta2 = parse(k, v)?,
            "train.adam_eps" => self.train.adam.eps = parse(k, v)?,
            "train.lambda" => self.train.loss.lambda = parse(k, v)?,
            "train.chunk_len" => self.train.loss.chunk.chunk_len = parse(k, v)?,
            "train.history_chunks" => self.train.loss.chunk.history_chunks = parse(k, v)?,
            "train.streaming" => self.train.loss.streaming = parse(k, v)?,
            "train.seed" => self.train.seed = parse(k, v)?,

            "decode.mode" => self.decode.mode = parse::<DecodeMode>(k, v)?,
            "decode.beam" => self.decode.beam = parse(k, v)?,
            "decode.mu_hat" => self.decode.weights.mu_hat = parse(k, v)?,
            "decode.mu_aed" => self.decode.weights.mu_aed = parse(k, v)?,
            "decode.rho_extlm" => self.decode.weights.rho_ext = parse(k, v)?,
            "decode.rho_ilm" => self.decode.weights.rho_ilm = parse(k, v)?,
            "decode.max_symbols_per_frame" => self.decode.max_symbols_per_frame = parse(k, v)?,
            "decode.streaming" => self.decode_streaming = parse(k, v)?,

            "extlm.embed" => self.extlm.embed = parse(k, v)?,
            "extlm.hidden" => self.extlm.hidden = parse(k, v)?,
            "extlm.layers" => self.extlm.layers = parse(k, v)?,
            "extlm.dim" => self.extlm.dim = parse(k, v)?,
            "extlm.ff_expansion" => self.extlm.ff_expansion = parse(k, v)?,
            "extlm.ln_eps" => self.extlm.ln_eps = parse(k, v)?,
            "extlm.epochs" => self.extlm_train.epochs = parse(k, v)?,
            "extlm.batch_size" => self.extlm_train.batch_size = parse(k, v)?,
            "extlm.lr" => self.extlm_train.adam.lr = parse(k, v)?,
            "extlm.warmup_steps" => self.extlm_train.adam.warmup_steps = parse(k, v)?,
            "extlm.seed" => self.extlm_train.seed = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    fn sync(&mut self) {
        self.model.vocab = self.corpus.vocab;
        self.model.feat_dim = self.corpus.feat_dim;
        self.extlm.vocab = self.corpus.vocab;
        self.decode.chunk = self.decode_streaming.then_some(self.train.loss.chunk);
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        self.extlm.validate()?;
        if self.extlm_train.epochs == 0 || self.extlm_train.batch_size == 0 || !(self.extlm_train.adam.lr > 0.0) {
            return Err(Error::Config("extlm.epochs, extlm.batch_size and extlm.lr must be positive".into()));
        }
        Ok(())
    }

    /// Replaces every seed with `AIO_SEED` when that variable is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                self.set_seed(parse(SEED_ENV, v.trim())?);
                Ok(())
            }
            Err(std::env::VarError::NotPresent) => Ok(()),
            Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.train.seed = seed;
        self.extlm_train.seed = seed;
    }
}
