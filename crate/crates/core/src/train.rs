//! Joint dual-mode training. Each utterance gets one offline and one
//! streaming pass through the encoder; the shared predictor and joiner then
//! produce the HAT, AED, CTC and TwA losses of both passes and the LM loss.
//! All nine terms live in one graph, so a single backward pass accumulates
//! every gradient into the shared parameters.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{aed_stream_mask, emission_frames_raw};
use crate::corpus::Utterance;
use crate::encoder::ChunkConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::loss::{combined_loss, ctc_loss_raw, cross_entropy_raw, transducer_loss_raw, LossComponents};
use crate::model::AioModel;
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub chunk: ChunkConfig,
    /// Ablation hook: `false` trains the offline terms (and LM) only.
    pub streaming: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.1, chunk: ChunkConfig { chunk_len: 4, history_chunks: 1 }, streaming: true }
    }
}

/// Index of each component in [`LossComponents::values`].
pub const HAT_OFF: usize = 0;
pub const AED_OFF: usize = 1;
pub const CTC_OFF: usize = 2;
pub const TWA_OFF: usize = 3;
pub const HAT_STR: usize = 4;
pub const AED_STR: usize = 5;
pub const CTC_STR: usize = 6;
pub const TWA_STR: usize = 7;
pub const LM: usize = 8;

/// The loss graph of one utterance.
pub struct LossGraph<'s> {
    pub graph: Graph<'s>,
    /// Scalar node per component; `None` for disabled streaming terms.
    pub nodes: [Option<Var>; 9],
    pub total: Var,
    pub components: LossComponents,
    /// Emission frames behind the streaming AED/TwA masks.
    pub stream_frames: Option<Vec<usize>>,
}

impl LossGraph<'_> {
    pub fn total_value(&self) -> f64 {
        self.graph.value(self.total).data()[0]
    }

    pub fn gradients(&self) -> Result<Gradients> {
        self.graph.backward(self.total)
    }

    /// Gradient of component `i` alone.
    pub fn component_gradients(&self, i: usize) -> Result<Gradients> {
        let node = self.nodes[i].ok_or_else(|| Error::InvalidInput(format!("{} is disabled", LossComponents::NAMES[i])))?;
        self.graph.backward(node)
    }
}

/// Attaches a dynamic-programming loss to the lattice node `lat`.
fn dp_loss(g: &mut Graph, lat: Var, name: &str, f: impl FnOnce(&[f64]) -> (f64, Vec<f64>)) -> Result<(f64, Var)> {
    let v = g.value(lat);
    if !v.all_finite() {
        return Err(Error::Numerical(format!("{name}: non-finite lattice values")));
    }
    let dims = v.dims().to_vec();
    let (value, grad) = f(v.data());
    if !value.is_finite() {
        return Err(Error::InvalidInput(format!("{name}: target infeasible")));
    }
    let node = g.precomputed(lat, value, Tensor::new(dims, grad)?)?;
    Ok((value, node))
}

pub fn build_loss_graph<'s>(model: &'s AioModel, x: &Tensor, y: &[usize], cfg: &LossConfig) -> Result<LossGraph<'s>> {
    let mc = model.config();
    let k = mc.vocab;
    let k1 = k + 1;
    if let Some(v) = y.iter().find(|&&v| v >= mc.eos()) {
        return Err(Error::InvalidInput(format!("transcript token {v} is EOS or out of range")));
    }
    let mut with_eos = y.to_vec();
    with_eos.push(mc.eos());
    let j = &model.joiner;
    let mut g = Graph::new(model.store());
    let mut values = [0.0; 9];
    let mut nodes: [Option<Var>; 9] = [None; 9];

    let h_pred = model.predictor.forward(&mut g, y)?;
    let p = j.pred_side(&mut g, h_pred)?;

    let mut passes = vec![(None, 0)];
    if cfg.streaming {
        passes.push((Some(&cfg.chunk), 4));
    }
    let mut stream_frames = None;
    for (chunk, base) in passes {
        let h_enc = model.encoder.forward(&mut g, x, chunk)?;
        let e = j.enc_side(&mut g, h_enc)?;
        let t_len = g.value(h_enc).rows();

        let (hat, _) = j.hat_graph(&mut g, &e, &p)?;
        let (v, n) = dp_loss(&mut g, hat, LossComponents::NAMES[base], |lp| transducer_loss_raw(lp, t_len, k1, y))?;
        values[base] = v;
        nodes[base] = Some(n);

        let mask = match chunk {
            None => None,
            Some(c) => {
                // hard alignment from the current streaming HAT lattice; no gradient flows through it
                let frames = emission_frames_raw(g.value(hat).data(), t_len, k1, y)
                    .ok_or_else(|| Error::InvalidInput("streaming alignment infeasible".into()))?;
                let m = aed_stream_mask(&frames, c, t_len);
                stream_frames = Some(frames);
                Some(m)
            }
        };
        let (pre, _) = j.aed_preact(&mut g, &e, &p, mask.as_deref())?;
        let aed = j.aed_graph(&mut g, pre)?;
        let (v, n) = dp_loss(&mut g, aed, LossComponents::NAMES[base + 1], |lp| cross_entropy_raw(lp, k, &with_eos))?;
        values[base + 1] = v;
        nodes[base + 1] = Some(n);

        let ctc = j.ctc_graph(&mut g, &e)?;
        let (v, n) = dp_loss(&mut g, ctc, LossComponents::NAMES[base + 2], |lp| ctc_loss_raw(lp, t_len, k1, y))?;
        values[base + 2] = v;
        nodes[base + 2] = Some(n);

        let twa = j.twa_graph(&mut g, &e, pre)?;
        let (v, n) = dp_loss(&mut g, twa, LossComponents::NAMES[base + 3], |lp| transducer_loss_raw(lp, t_len, k1, y))?;
        values[base + 3] = v;
        nodes[base + 3] = Some(n);
    }

    let lm = j.lm_graph(&mut g, &p)?;
    let (v, n) = dp_loss(&mut g, lm, LossComponents::NAMES[LM], |lp| cross_entropy_raw(lp, k, &with_eos))?;
    values[LM] = v;
    nodes[LM] = Some(n);

    // every ASR term enters with weight one; only the LM term is scaled
    let mut terms: Vec<(Var, f64)> = nodes[..LM].iter().flatten().map(|&n| (n, 1.0)).collect();
    if cfg.lambda != 0.0 {
        terms.push((n, cfg.lambda));
    }
    let total = g.weighted_sum(&terms)?;
    Ok(LossGraph { graph: g, nodes, total, components: LossComponents::from_values(values), stream_frames })
}

/// The nine loss values of one utterance.
pub fn forward_all_modes(model: &AioModel, x: &Tensor, y: &[usize], cfg: &LossConfig) -> Result<LossComponents> {
    Ok(build_loss_graph(model, x, y, cfg)?.components)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-3, warmup_steps: 200, beta1: 0.9, beta2: 0.98, eps: 1e-6 }
    }
}

/// Adam with linear warmup followed by inverse-square-root decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.dims())).collect();
        Self { config, m: zeros.clone(), v: zeros, step: 0 }
    }

    /// Learning rate applied at (1-based) step `step`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let c = &self.config;
        if c.warmup_steps == 0 {
            return c.lr;
        }
        let (s, w) = (step.max(1) as f64, c.warmup_steps as f64);
        c.lr * (s / w).min((w / s).sqrt())
    }

    /// Applies one update; a non-finite gradient leaves parameters and state untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::Numerical("non-finite gradient, step rejected".into()));
        }
        if grads.tensors().len() != self.m.len() {
            return Err(Error::Shape("gradient layout differs from optimizer state".into()));
        }
        self.step += 1;
        let c = &self.config;
        let lr = self.learning_rate(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in store.tensors_mut().iter_mut().enumerate() {
            let g = grads.tensors()[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 8, adam: AdamConfig::default(), loss: LossConfig::default(), seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.loss.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if !(a.eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        ChunkConfig::new(self.loss.chunk.chunk_len, self.loss.chunk.history_chunks)?;
        Ok(())
    }
}

/// Mean per-utterance losses of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub components: LossComponents,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str =
    "epoch,step,L_hat_off,L_aed_off,L_ctc_off,L_twa_off,L_hat_str,L_aed_str,L_ctc_str,L_twa_str,L_lm,total";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{}", self.epoch, self.step);
        for v in self.components.values() {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{}", self.total));
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    /// Mean per-utterance components for each epoch.
    pub epochs: Vec<LossComponents>,
    pub skipped: usize,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{LOSS_CSV_HEADER}")?;
        for s in &self.steps {
            writeln!(w, "{}", s.csv_row())?;
        }
        Ok(())
    }

    pub fn epoch_totals(&self, lambda: f64) -> Vec<f64> {
        self.epochs.iter().map(|c| combined_loss(c, lambda)).collect()
    }
}

/// Loss and summed gradients over a batch; infeasible utterances are skipped.
fn batch_gradients(
    model: &AioModel,
    batch: &[&Utterance],
    cfg: &LossConfig,
) -> Result<(Option<(LossComponents, f64, Gradients)>, usize)> {
    let mut grads = Gradients::zeros_like(model.store());
    let mut comps = LossComponents::default();
    let mut total = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for u in batch {
        match build_loss_graph(model, &u.feats, &u.tokens, cfg) {
            Ok(lg) => {
                lg.graph.backward_into(lg.total, 1.0, &mut grads)?;
                comps.add(&lg.components);
                total += lg.total_value();
                used += 1;
            }
            Err(Error::InvalidInput(m)) => {
                log::warn!("skipping {}: {m}", u.id);
                skipped += 1;
            }
            Err(Error::Numerical(m)) => {
                log::warn!("{}: {m}", u.id);
                return Ok((Some((comps, f64::NAN, grads)), skipped));
            }
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Ok((None, skipped));
    }
    let s = 1.0 / used as f64;
    grads.scale(s);
    Ok((Some((comps.scaled(s), total * s, grads)), skipped))
}

/// Shuffling order of one epoch; depends only on the seed and epoch index.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

/// Single-stage joint training of epochs `start_epoch+1 ..= cfg.epochs`, so a
/// resumed run continues the shuffling sequence. `on_epoch` runs after every
/// epoch (for checkpointing). Three consecutive steps with a non-finite loss
/// abort.
pub fn train(
    model: &mut AioModel,
    opt: &mut Adam,
    data: &[Utterance],
    cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(usize, &AioModel, &Adam) -> Result<()>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("empty training corpus".into()));
    }
    let mut log = TrainLog::default();
    let mut bad_steps = 0;
    for epoch in start_epoch + 1..=cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut sum = LossComponents::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Utterance> = chunk.iter().map(|&i| &data[i]).collect();
            let (res, skipped) = batch_gradients(model, &batch, &cfg.loss)?;
            log.skipped += skipped;
            let Some((comps, total, grads)) = res else { continue };
            if !total.is_finite() {
                bad_steps += 1;
                log::warn!("epoch {epoch}: non-finite loss ({bad_steps} consecutive)");
                if bad_steps >= 3 {
                    return Err(Error::Numerical("training diverged: three consecutive non-finite losses".into()));
                }
                continue;
            }
            match opt.update(model.store_mut(), &grads) {
                Ok(()) => bad_steps = 0,
                Err(Error::Numerical(m)) => {
                    bad_steps += 1;
                    log::warn!("epoch {epoch}: {m}");
                    if bad_steps >= 3 {
                        return Err(Error::Numerical("training diverged: three consecutive rejected steps".into()));
                    }
                    continue;
                }
                Err(e) => return Err(e),
            }
            log.steps.push(StepLog { epoch, step: opt.step, components: comps, total });
            sum.add(&comps);
            batches += 1;
        }
        let mean = sum.scaled(1.0 / batches.max(1) as f64);
        log::info!("epoch {epoch}: total {:.4} ({mean})", combined_loss(&mean, cfg.loss.lambda));
        log.epochs.push(mean);
        on_epoch(epoch, model, opt)?;
    }
    Ok(log)
}
