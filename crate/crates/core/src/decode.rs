//! Greedy and beam decoding in frame-synchronous (HAT, streaming AED, joint)
//! and label-synchronous (offline AED) form, CTC decoding, and log-linear
//! label fusion with internal-LM subtraction.
//!
//! Frame-synchronous search limits emissions cumulatively: at frame `t` a
//! hypothesis may emit while its length is below `cap·(t+1)`. The limit
//! depends only on `(prefix, t)`, so hypotheses reaching the same prefix at
//! the same frame are always interchangeable and can be merged.

use std::cell::{Cell, RefCell};
use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::rc::Rc;

use crate::encoder::ChunkConfig;
use crate::error::{Error, Result};
use crate::extlm::{ExtLmState, ExternalLm};
use crate::joiner::{EncCell, Joiner, PredCell};
use crate::model::AioModel;
use crate::ops::log_add;
use crate::predictor::PredictorState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecodeMode {
    Hat,
    Ctc,
    AedOffline,
    AedStream,
    Joint,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hat" => Ok(DecodeMode::Hat),
            "ctc" => Ok(DecodeMode::Ctc),
            "aed" => Ok(DecodeMode::AedOffline),
            "aed-stream" => Ok(DecodeMode::AedStream),
            "joint" => Ok(DecodeMode::Joint),
            other => Err(Error::Config(format!("unknown decoding mode {other}"))),
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Hat => "hat",
            DecodeMode::Ctc => "ctc",
            DecodeMode::AedOffline => "aed",
            DecodeMode::AedStream => "aed-stream",
            DecodeMode::Joint => "joint",
        })
    }
}

/// Weights of joint label fusion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionWeights {
    pub mu_hat: f64,
    pub mu_aed: f64,
    pub rho_ext: f64,
    pub rho_ilm: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self { mu_hat: 1.0, mu_aed: 0.0, rho_ext: 0.0, rho_ilm: 0.0 }
    }
}

impl FusionWeights {
    pub fn new(mu_hat: f64, mu_aed: f64, rho_ext: f64, rho_ilm: f64) -> Result<Self> {
        let w = Self { mu_hat, mu_aed, rho_ext, rho_ilm };
        w.validate()?;
        Ok(w)
    }

    /// `μ_HAT = mu_hat`, `μ_AED = 1 − mu_hat`.
    pub fn with_mu_hat(mu_hat: f64, rho_ext: f64, rho_ilm: f64) -> Result<Self> {
        Self::new(mu_hat, 1.0 - mu_hat, rho_ext, rho_ilm)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.mu_hat) || !unit.contains(&self.mu_aed) || (self.mu_hat + self.mu_aed - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "mu_hat {} and mu_aed {} must be non-negative and sum to 1",
                self.mu_hat, self.mu_aed
            )));
        }
        if !(self.rho_ext >= 0.0) || !(self.rho_ilm >= 0.0) {
            return Err(Error::Config("LM weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam: usize,
    pub weights: FusionWeights,
    pub max_symbols_per_frame: usize,
    /// Streaming operation when set: chunked encoder and chunk-limited AED.
    pub chunk: Option<ChunkConfig>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { mode: DecodeMode::Hat, beam: 8, weights: FusionWeights::default(), max_symbols_per_frame: 5, chunk: None }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::Config("max_symbols_per_frame must be at least 1".into()));
        }
        if self.mode == DecodeMode::AedStream && self.chunk.is_none() {
            return Err(Error::Config("aed-stream decoding needs a chunk configuration".into()));
        }
        self.weights.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
}

impl Hypothesis {
    /// `score<TAB>ids` line of an n-best file.
    pub fn to_line(&self) -> String {
        let ids: Vec<String> = self.tokens.iter().map(ToString::to_string).collect();
        format!("{}\t{}", self.score, ids.join(" "))
    }
}

fn fusion_source<'a>(weight: f64, src: Option<&'a [f64]>, width: usize, name: &str) -> Result<Option<&'a [f64]>> {
    if weight == 0.0 {
        return Ok(None);
    }
    match src {
        Some(s) if s.len() == width => Ok(Some(s)),
        Some(_) => Err(Error::Shape(format!("{name} scores have the wrong width"))),
        None => Err(Error::Config(format!("{name} scores required by a non-zero weight"))),
    }
}

/// Log-linear label fusion. Zero-weighted sources are not read, and the two
/// LM terms are combined before being added so equal terms cancel exactly.
pub fn fuse_label_scores(
    hat: &[f64],
    aed: Option<&[f64]>,
    extlm: Option<&[f64]>,
    ilm: Option<&[f64]>,
    w: &FusionWeights,
) -> Result<Vec<f64>> {
    w.validate()?;
    let aed = fusion_source(w.mu_aed, aed, hat.len(), "AED")?;
    let ext = fusion_source(w.rho_ext, extlm, hat.len(), "external LM")?;
    let ilm = fusion_source(w.rho_ilm, ilm, hat.len(), "internal LM")?;
    Ok((0..hat.len())
        .map(|k| {
            let mut s = if w.mu_hat == 0.0 { 0.0 } else { w.mu_hat * hat[k] };
            if let Some(a) = aed {
                s += w.mu_aed * a[k];
            }
            let lm = ext.map_or(0.0, |e| w.rho_ext * e[k]) - ilm.map_or(0.0, |i| w.rho_ilm * i[k]);
            if ext.is_some() || ilm.is_some() {
                s += lm;
            }
            s
        })
        .collect())
}

/// Blank log-probability and the complete log-scores of emitting each label
/// (blank complement already included).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScores {
    pub log_blank: f64,
    pub labels: Vec<f64>,
}

/// Source of frame-synchronous scores.
pub trait FrameScorer {
    type State: Clone;
    fn num_frames(&self) -> usize;
    fn eos(&self) -> Option<usize>;
    fn initial(&mut self) -> Result<Self::State>;
    fn extend(&mut self, state: &Self::State, token: usize) -> Result<Self::State>;
    fn frame_scores(&mut self, state: &Self::State, t: usize) -> Result<FrameScores>;
}

/// Source of label-synchronous scores.
pub trait LabelScorer {
    type State: Clone;
    fn eos(&self) -> usize;
    fn initial(&mut self) -> Result<Self::State>;
    fn extend(&mut self, state: &Self::State, token: usize) -> Result<Self::State>;
    fn label_scores(&mut self, state: &Self::State) -> Result<Vec<f64>>;
}

/// Index of the first maximum.
fn argmax(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 || i == 0 {
            best = (i, x);
        }
    }
    best.0
}

/// Candidate ordering: higher score first, then the lexicographically smaller
/// extended sequence (EOS counted as a token), then blank before label.
fn rank(a: (f64, &[usize], usize), b: (f64, &[usize], usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1)).then(a.2.cmp(&b.2))
}

pub fn greedy_frame_sync<S: FrameScorer>(scorer: &mut S, cap: usize) -> Result<Vec<usize>> {
    let t_len = scorer.num_frames();
    let eos = scorer.eos();
    let mut state = scorer.initial()?;
    let mut prefix = Vec::new();
    for t in 0..t_len {
        while prefix.len() < cap * (t + 1) {
            let fs = scorer.frame_scores(&state, t)?;
            let best = argmax(std::iter::once(fs.log_blank).chain(fs.labels.iter().copied()));
            if best == 0 {
                break;
            }
            let k = best - 1;
            if Some(k) == eos {
                return Ok(prefix);
            }
            prefix.push(k);
            state = scorer.extend(&state, k)?;
        }
    }
    Ok(prefix)
}

#[derive(Clone, Copy)]
enum Origin {
    Blank(usize),
    Label(usize, usize),
}

struct Candidate {
    prefix: Vec<usize>,
    /// Sequence used for ordering (EOS appended for EOS-terminated ones).
    order_key: Vec<usize>,
    t: usize,
    is_final: bool,
    score: f64,
    origin: Origin,
    kind: usize,
}

/// Alignment-length synchronous beam search. Every step advances all active
/// hypotheses by one lattice move (one blank or one label).
pub fn beam_frame_sync<S: FrameScorer>(scorer: &mut S, beam: usize, cap: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let t_len = scorer.num_frames();
    let eos = scorer.eos();
    struct Active<St> {
        prefix: Vec<usize>,
        t: usize,
        score: f64,
        state: St,
    }
    let mut active = vec![Active { prefix: Vec::new(), t: 0, score: 0.0, state: scorer.initial()? }];
    let mut finals: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    while !active.is_empty() {
        let mut cands: Vec<Candidate> = Vec::new();
        let mut index: HashMap<(Vec<usize>, usize, bool), usize> = HashMap::new();
        let mut push = |c: Candidate| {
            let key = (c.prefix.clone(), c.t, c.is_final);
            match index.get(&key) {
                Some(&i) => {
                    let e: &mut Candidate = &mut cands[i];
                    e.score = log_add(e.score, c.score);
                    if matches!(c.origin, Origin::Blank(_)) {
                        e.origin = c.origin;
                    }
                    if rank((0.0, &c.order_key, c.kind), (0.0, &e.order_key, e.kind)) == Ordering::Less {
                        e.order_key = c.order_key;
                        e.kind = c.kind;
                    }
                }
                None => {
                    index.insert(key, cands.len());
                    cands.push(c);
                }
            }
        };
        for (i, h) in active.iter().enumerate() {
            let fs = scorer.frame_scores(&h.state, h.t)?;
            push(Candidate {
                prefix: h.prefix.clone(),
                order_key: h.prefix.clone(),
                t: h.t + 1,
                is_final: h.t + 1 == t_len,
                score: h.score + fs.log_blank,
                origin: Origin::Blank(i),
                kind: 0,
            });
            if h.prefix.len() < cap * (h.t + 1) {
                for (k, &s) in fs.labels.iter().enumerate() {
                    let mut ext = h.prefix.clone();
                    ext.push(k);
                    let is_eos = Some(k) == eos;
                    push(Candidate {
                        prefix: if is_eos { h.prefix.clone() } else { ext.clone() },
                        order_key: ext,
                        t: h.t,
                        is_final: is_eos,
                        score: h.score + s,
                        origin: Origin::Label(i, k),
                        kind: k + 1,
                    });
                }
            }
        }
        cands.sort_by(|a, b| {
            rank((a.score, &a.order_key, a.kind), (b.score, &b.order_key, b.kind))
                .then(a.t.cmp(&b.t))
                .then(a.is_final.cmp(&b.is_final))
        });
        // finals do not occupy beam slots but must rank ahead of the last
        // surviving active hypothesis
        let mut next = Vec::with_capacity(beam);
        for c in cands {
            if next.len() == beam {
                break;
            }
            if c.is_final {
                let e = finals.entry(c.prefix).or_insert(f64::NEG_INFINITY);
                *e = log_add(*e, c.score);
                continue;
            }
            let state = match c.origin {
                Origin::Blank(i) => active[i].state.clone(),
                Origin::Label(i, k) => scorer.extend(&active[i].state, k)?,
            };
            next.push(Active { prefix: c.prefix, t: c.t, score: c.score, state });
        }
        active = next;
    }
    Ok(nbest(finals, beam))
}

fn nbest(finals: BTreeMap<Vec<usize>, f64>, n: usize) -> Vec<Hypothesis> {
    let mut out: Vec<Hypothesis> = finals.into_iter().map(|(tokens, score)| Hypothesis { tokens, score }).collect();
    out.sort_by(|a, b| rank((a.score, &a.tokens, 0), (b.score, &b.tokens, 0)));
    out.truncate(n);
    out
}

/// Label-synchronous beam search; a hypothesis that reaches `max_len` labels
/// is closed with the EOS score.
pub fn beam_label_sync<S: LabelScorer>(scorer: &mut S, beam: usize, max_len: usize) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    let eos = scorer.eos();
    let mut active = vec![(Vec::new(), 0.0, scorer.initial()?)];
    let mut finals: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    while !active.is_empty() {
        // (prefix, ordering key, score, parent, token or None for EOS)
        let mut cands: Vec<(Vec<usize>, Vec<usize>, f64, usize, Option<usize>)> = Vec::new();
        for (i, (prefix, score, state)) in active.iter().enumerate() {
            let lp = scorer.label_scores(state)?;
            let mut with_eos = prefix.clone();
            with_eos.push(eos);
            cands.push((prefix.clone(), with_eos, score + lp[eos], i, None));
            if prefix.len() < max_len {
                for (k, &l) in lp.iter().enumerate() {
                    if k != eos {
                        let mut ext = prefix.clone();
                        ext.push(k);
                        cands.push((ext.clone(), ext, score + l, i, Some(k)));
                    }
                }
            }
        }
        cands.sort_by(|a, b| rank((a.2, &a.1, 0), (b.2, &b.1, 0)));
        cands.truncate(beam);
        let mut next = Vec::new();
        for (prefix, _, score, parent, tok) in cands {
            match tok {
                None => {
                    let e = finals.entry(prefix).or_insert(f64::NEG_INFINITY);
                    *e = e.max(score);
                }
                Some(k) => {
                    let st = scorer.extend(&active[parent].2, k)?;
                    next.push((prefix, score, st));
                }
            }
        }
        // scores only fall as hypotheses grow
        if finals.len() >= beam {
            let mut fs: Vec<f64> = finals.values().copied().collect();
            fs.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
            let floor = fs[beam - 1];
            next.retain(|h| h.1 >= floor);
        }
        active = next;
    }
    Ok(nbest(finals, beam))
}

/// Best-path CTC decoding: per-frame argmax, repeats merged, blanks removed.
/// Decoding stops at the first EOS.
pub fn ctc_greedy(log_probs: &Tensor, eos: Option<usize>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = 0;
    for t in 0..log_probs.rows() {
        let best = argmax(log_probs.row(t).iter().copied());
        if best != 0 && best != prev {
            if Some(best - 1) == eos {
                break;
            }
            out.push(best - 1);
        }
        prev = best;
    }
    out
}

/// CTC prefix beam search over a `T′×(K+1)` log-probability matrix. EOS is
/// never proposed as an extension.
pub fn ctc_prefix_beam(log_probs: &Tensor, beam: usize, eos: Option<usize>) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Config("beam must be at least 1".into()));
    }
    const NI: f64 = f64::NEG_INFINITY;
    let k1 = log_probs.cols();
    let mut beams: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
    beams.insert(Vec::new(), (0.0, NI));
    for t in 0..log_probs.rows() {
        let lp = log_probs.row(t);
        let mut next: BTreeMap<Vec<usize>, (f64, f64)> = BTreeMap::new();
        for (prefix, &(pb, pnb)) in &beams {
            let total = log_add(pb, pnb);
            let e = next.entry(prefix.clone()).or_insert((NI, NI));
            e.0 = log_add(e.0, total + lp[0]);
            if let Some(&last) = prefix.last() {
                e.1 = log_add(e.1, pnb + lp[1 + last]);
            }
            for k in 0..k1 - 1 {
                if Some(k) == eos {
                    continue;
                }
                let mut ext = prefix.clone();
                ext.push(k);
                let from = if prefix.last() == Some(&k) { pb } else { total };
                let e = next.entry(ext).or_insert((NI, NI));
                e.1 = log_add(e.1, from + lp[1 + k]);
            }
        }
        let mut ranked: Vec<(Vec<usize>, (f64, f64))> = next.into_iter().collect();
        ranked.sort_by(|a, b| rank((log_add(a.1 .0, a.1 .1), &a.0, 0), (log_add(b.1 .0, b.1 .1), &b.0, 0)));
        ranked.truncate(beam);
        beams = ranked.into_iter().collect();
    }
    let finals = beams.into_iter().map(|(p, (a, b))| (p, log_add(a, b))).collect();
    Ok(nbest(finals, beam))
}

/// Predictor-derived quantities for one prefix, shared by every label source.
pub struct PrefixState {
    pub pred: PredictorState,
    pub cell: PredCell,
    ilm: RefCell<Option<Rc<Vec<f64>>>>,
    ext: Option<ExtLmState>,
    aed: RefCell<HashMap<usize, Rc<Vec<f64>>>>,
}

/// Frame- and label-synchronous scorer backed by a model and one utterance.
pub struct ModelScorer<'a> {
    model: &'a AioModel,
    joiner: Joiner<'a>,
    mode: DecodeMode,
    weights: FusionWeights,
    chunk: Option<ChunkConfig>,
    extlm: Option<&'a ExternalLm>,
    enc: Tensor,
    enc_cells: Vec<EncCell>,
    keys: Tensor,
    values: Tensor,
    predictor_calls: Cell<usize>,
    extensions: Cell<usize>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a AioModel, x: &Tensor, cfg: &DecodeConfig, extlm: Option<&'a ExternalLm>) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode == DecodeMode::Joint && cfg.weights.rho_ext > 0.0 && extlm.is_none() {
            return Err(Error::Config("rho_ext > 0 needs an external LM".into()));
        }
        let enc = match &cfg.chunk {
            Some(c) => model.encode_streaming(x, c)?,
            None => model.encode_offline(x)?,
        };
        Self::from_encoding(model, enc, cfg, extlm)
    }

    pub fn from_encoding(model: &'a AioModel, enc: Tensor, cfg: &DecodeConfig, extlm: Option<&'a ExternalLm>) -> Result<Self> {
        let joiner = model.joiner();
        let enc_cells = (0..enc.rows()).map(|t| joiner.enc_cell(enc.row(t))).collect::<Result<Vec<_>>>()?;
        let d = model.config().joiner_dim;
        let keys = Tensor::matrix(enc.rows(), d, enc_cells.iter().flat_map(|c| c.k.iter().copied()).collect())?;
        let values = Tensor::matrix(enc.rows(), d, enc_cells.iter().flat_map(|c| c.v.iter().copied()).collect())?;
        let use_ext = cfg.mode == DecodeMode::Joint && cfg.weights.rho_ext > 0.0;
        Ok(Self {
            model,
            joiner,
            mode: cfg.mode,
            weights: cfg.weights,
            chunk: cfg.chunk,
            extlm: if use_ext { extlm } else { None },
            enc,
            enc_cells,
            keys,
            values,
            predictor_calls: Cell::new(0),
            extensions: Cell::new(0),
        })
    }

    pub fn encoding(&self) -> &Tensor {
        &self.enc
    }

    /// ASR predictor evaluations so far (the start symbol included).
    pub fn predictor_calls(&self) -> usize {
        self.predictor_calls.get()
    }

    /// Hypothesis extensions requested so far.
    pub fn extensions(&self) -> usize {
        self.extensions.get()
    }

    fn make_state(&self, prev: Option<usize>, parent: Option<&PrefixState>) -> Result<Rc<PrefixState>> {
        let base = self.model.initial_state();
        let from = parent.map_or(&base, |p| &p.pred);
        self.predictor_calls.set(self.predictor_calls.get() + 1);
        let (h, pred) = self.model.predict(prev, from)?;
        let cell = self.joiner.pred_cell(&h)?;
        let ext = match self.extlm {
            Some(lm) => Some(match (parent, prev) {
                (Some(p), Some(k)) => lm.extend(p.ext.as_ref().expect("external LM state"), k)?,
                _ => lm.initial()?,
            }),
            None => None,
        };
        Ok(Rc::new(PrefixState { pred, cell, ilm: RefCell::new(None), ext, aed: RefCell::new(HashMap::new()) }))
    }

    /// Frames visible to the AED path when scoring at frame `t`.
    pub(crate) fn aed_limit(&self, t: usize) -> usize {
        let t_len = self.enc.rows();
        self.chunk.map_or(t_len, |c| c.chunk_end(t, t_len))
    }

    /// AED label log-distribution of a prefix attending frames `[0, limit)`.
    pub fn aed_scores(&self, s: &PrefixState, limit: usize) -> Result<Rc<Vec<f64>>> {
        if let Some(v) = s.aed.borrow().get(&limit) {
            return Ok(v.clone());
        }
        let allowed: Vec<bool> = (0..self.enc.rows()).map(|t| t < limit).collect();
        let pre = self.joiner.aed_preact(&s.cell, &self.keys, &self.values, &allowed)?;
        let v = Rc::new(self.joiner.aed_cell(&pre)?.label_log_probs());
        s.aed.borrow_mut().insert(limit, v.clone());
        Ok(v)
    }

    /// Internal LM log-distribution of a prefix.
    pub fn ilm_scores(&self, s: &PrefixState) -> Result<Rc<Vec<f64>>> {
        if let Some(v) = s.ilm.borrow().as_ref() {
            return Ok(v.clone());
        }
        let v = Rc::new(self.joiner.lm_cell(&s.cell)?.label_log_probs());
        *s.ilm.borrow_mut() = Some(v.clone());
        Ok(v)
    }

    /// Per-head sigmoid attention weights of the HAT cell at `(t, prefix)`.
    pub fn sigmoid_weights(&self, s: &PrefixState, t: usize) -> Result<Vec<f64>> {
        let e = &self.enc_cells[t];
        Ok(self.joiner.sigmoid_context(&s.cell.q, &e.k, &e.v)?.1)
    }

    /// Head-averaged AED attention over all frames, zero beyond `limit`.
    pub fn aed_weights(&self, s: &PrefixState, limit: usize) -> Result<Vec<f64>> {
        let t_len = self.enc.rows();
        let allowed: Vec<bool> = (0..t_len).map(|t| t < limit).collect();
        let (_, w) = self.joiner.softmax_context(&s.cell.q, &self.keys, &self.values, &allowed)?;
        let heads = w.len() / t_len;
        Ok((0..t_len).map(|t| (0..heads).map(|h| w[h * t_len + t]).sum::<f64>() / heads as f64).collect())
    }

    /// HAT blank and label log-probabilities at `(t, prefix)`.
    pub fn hat_cell(&self, s: &PrefixState, t: usize) -> Result<crate::joiner::HeadOut> {
        self.joiner.hat_cell(&self.enc_cells[t], &s.cell)
    }
}

impl FrameScorer for ModelScorer<'_> {
    type State = Rc<PrefixState>;

    fn num_frames(&self) -> usize {
        self.enc.rows()
    }

    fn eos(&self) -> Option<usize> {
        Some(self.model.config().eos())
    }

    fn initial(&mut self) -> Result<Self::State> {
        self.make_state(None, None)
    }

    fn extend(&mut self, state: &Self::State, token: usize) -> Result<Self::State> {
        self.extensions.set(self.extensions.get() + 1);
        self.make_state(Some(token), Some(state))
    }

    fn frame_scores(&mut self, s: &Self::State, t: usize) -> Result<FrameScores> {
        let hat = self.hat_cell(s, t)?;
        let log_blank = hat.log_blank().expect("HAT has a blank");
        let nb = hat.log_not_blank().expect("HAT has a blank");
        let labels = match self.mode {
            DecodeMode::Hat => hat.label_log_probs(),
            DecodeMode::AedStream | DecodeMode::AedOffline => (*self.aed_scores(s, self.aed_limit(t))?).clone(),
            DecodeMode::Joint => {
                let w = self.weights;
                let hat_ls = hat.label_log_probs();
                let aed = if w.mu_aed > 0.0 { Some(self.aed_scores(s, self.aed_limit(t))?) } else { None };
                let ilm = if w.rho_ilm > 0.0 { Some(self.ilm_scores(s)?) } else { None };
                let ext = s.ext.as_ref().map(|e| e.log_probs());
                fuse_label_scores(&hat_ls, aed.as_deref().map(Vec::as_slice), ext, ilm.as_deref().map(Vec::as_slice), &w)?
            }
            DecodeMode::Ctc => return Err(Error::Config("CTC is decoded without the predictor".into())),
        };
        Ok(FrameScores { log_blank, labels: labels.iter().map(|l| nb + l).collect() })
    }
}

impl LabelScorer for ModelScorer<'_> {
    type State = Rc<PrefixState>;

    fn eos(&self) -> usize {
        self.model.config().eos()
    }

    fn initial(&mut self) -> Result<Self::State> {
        self.make_state(None, None)
    }

    fn extend(&mut self, state: &Self::State, token: usize) -> Result<Self::State> {
        self.extensions.set(self.extensions.get() + 1);
        self.make_state(Some(token), Some(state))
    }

    fn label_scores(&mut self, s: &Self::State) -> Result<Vec<f64>> {
        Ok((*self.aed_scores(s, self.enc.rows())?).clone())
    }
}

/// Internal LM log-distribution for the prefix whose predictor output is `h_pred`.
pub fn internal_lm_score(model: &AioModel, h_pred: &[f64]) -> Result<Vec<f64>> {
    let j = model.joiner();
    Ok(j.lm_cell(&j.pred_cell(h_pred)?)?.label_log_probs())
}

/// External LM log-distribution following `prefix`.
pub fn external_lm_score(lm: &ExternalLm, prefix: &[usize]) -> Result<Vec<f64>> {
    Ok(lm.state_for(prefix)?.log_probs().to_vec())
}

/// Decodes one utterance according to `cfg` and returns the n-best list.
pub fn decode(model: &AioModel, x: &Tensor, cfg: &DecodeConfig, extlm: Option<&ExternalLm>) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let cap = cfg.max_symbols_per_frame;
    match cfg.mode {
        DecodeMode::Ctc => {
            let enc = match &cfg.chunk {
                Some(c) => model.encode_streaming(x, c)?,
                None => model.encode_offline(x)?,
            };
            let lat = model.joiner().ctc_forward(&enc)?;
            let eos = Some(model.config().eos());
            if cfg.beam == 1 {
                let tokens = ctc_greedy(lat.log_probs(), eos);
                let score = ctc_path_score(lat.log_probs());
                return Ok(vec![Hypothesis { tokens, score }]);
            }
            ctc_prefix_beam(lat.log_probs(), cfg.beam, eos)
        }
        DecodeMode::AedOffline => {
            let offline = DecodeConfig { chunk: None, ..cfg.clone() };
            let mut s = ModelScorer::new(model, x, &offline, extlm)?;
            let max_len = s.num_frames() * cap;
            beam_label_sync(&mut s, cfg.beam, max_len)
        }
        _ => {
            let mut s = ModelScorer::new(model, x, cfg, extlm)?;
            beam_frame_sync(&mut s, cfg.beam, cap)
        }
    }
}

/// Log-probability of the best CTC frame path.
fn ctc_path_score(lp: &Tensor) -> f64 {
    (0..lp.rows()).map(|t| lp.row(t).iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum()
}
