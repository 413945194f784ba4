//! Multi-mode joiner: one parameter set evaluated as HAT, AED, CTC, LM or
//! TwA by switching which of its paths are active.
//!
//! Two evaluation routes exist. The graph route builds whole lattices in one
//! batched pass and is what training differentiates. The cell route evaluates
//! one `(t, u)` cell, one frame or one prefix at a time and is what the
//! decoders use. Both share the same row kernels, so a cell of the batched
//! lattice is bit-identical to the cell computed directly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lattice::{Mode, PosteriorLattice};
use crate::ops::{self, affine, layer_norm, linear, log_sigmoid, log_softmax, Activation};
use crate::params::{Builder, FeedForwardIds, LayerNormIds, Linear, ParamStore};
use crate::tensor::{dot, Tensor};

/// Feed-forward, residual, layer norm and label projection applied to a
/// joiner state to obtain label logits.
#[derive(Clone, Debug)]
pub struct LabelHeadIds {
    pub ff: FeedForwardIds,
    pub ln_ff: LayerNormIds,
    pub label: Linear,
}

impl LabelHeadIds {
    pub(crate) fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        dim: usize,
        vocab: usize,
        expansion: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(Self {
            ff: b.feed_forward("ff", dim, expansion, Activation::Gelu)?,
            ln_ff: b.layer_norm("ln_ff", dim, eps)?,
            label: b.linear("label", vocab, dim, true)?,
        })
    }

    pub fn logits_graph(&self, g: &mut Graph, hj: Var) -> Result<Var> {
        let f = g.feed_forward(hj, &self.ff)?;
        let s = g.add(hj, f)?;
        let n = g.layer_norm(s, &self.ln_ff)?;
        g.linear(n, &self.label)
    }

    pub fn logits(&self, store: &ParamStore, hj: &[f64]) -> Result<Vec<f64>> {
        let f = ops::feed_forward(hj, &self.ff.view(store))?;
        let s: Vec<f64> = hj.iter().zip(&f).map(|(a, b)| a + b).collect();
        let n = layer_norm(&s, &self.ln_ff.view(store));
        affine(&n, store.get(self.label.weight), bias(store, &self.label))
    }
}

fn bias<'s>(store: &'s ParamStore, l: &Linear) -> &'s [f64] {
    store.get(l.bias.expect("linear layer with bias")).data()
}

#[derive(Clone, Debug)]
pub struct JoinerIds {
    pub enc: Linear,
    pub pred: Linear,
    /// `[1×D]` weight and `[1]` bias of the blank logit.
    pub blank: Linear,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub proj: Linear,
    pub ln_q: LayerNormIds,
    pub ln_kv: LayerNormIds,
    pub head: LabelHeadIds,
    pub heads: usize,
    pub dim: usize,
}

impl JoinerIds {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        enc_dim: usize,
        pred_dim: usize,
        dim: usize,
        vocab: usize,
        heads: usize,
        expansion: usize,
        eps: f64,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("joiner width {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            enc: b.linear("enc", dim, enc_dim, true)?,
            pred: b.linear("pred", dim, pred_dim, true)?,
            blank: b.linear("blank", 1, dim, true)?,
            query: b.linear("query", dim, dim, false)?,
            key: b.linear("key", dim, dim, false)?,
            value: b.linear("value", dim, dim, false)?,
            proj: b.linear("proj", dim, dim, false)?,
            ln_q: b.layer_norm("ln_q", dim, eps)?,
            ln_kv: b.layer_norm("ln_kv", dim, eps)?,
            head: LabelHeadIds::build(b, dim, vocab, expansion, eps)?,
            heads,
            dim,
        })
    }
}

/// Projected encoder frames with their keys and values (`T′×D` each).
#[derive(Clone, Copy, Debug)]
pub struct EncSide {
    pub he: Var,
    pub k: Var,
    pub v: Var,
}

/// Projected predictor rows with their queries (`(U+1)×D` each).
#[derive(Clone, Copy, Debug)]
pub struct PredSide {
    pub hp: Var,
    pub q: Var,
}

impl JoinerIds {
    pub fn enc_side(&self, g: &mut Graph, h_enc: Var) -> Result<EncSide> {
        let he = g.linear(h_enc, &self.enc)?;
        let n = g.layer_norm(he, &self.ln_kv)?;
        let k = g.linear(n, &self.key)?;
        let v = g.linear(n, &self.value)?;
        Ok(EncSide { he, k, v })
    }

    pub fn pred_side(&self, g: &mut Graph, h_pred: Var) -> Result<PredSide> {
        let hp = g.linear(h_pred, &self.pred)?;
        let n = g.layer_norm(hp, &self.ln_q)?;
        let q = g.linear(n, &self.query)?;
        Ok(PredSide { hp, q })
    }

    /// `[blank | labels]` log-probabilities for each row of `hj`.
    pub fn factored_graph(&self, g: &mut Graph, hj: Var) -> Result<Var> {
        let z = g.linear(hj, &self.blank)?;
        let l = self.head.logits_graph(g, hj)?;
        g.factored_log_probs(z, l)
    }

    pub fn labels_graph(&self, g: &mut Graph, hj: Var) -> Result<Var> {
        let l = self.head.logits_graph(g, hj)?;
        g.log_softmax(l)
    }

    /// Returns the HAT lattice `[T′·(U+1) × (K+1)]` and the sigmoid attention
    /// node (whose weights can be read back with [`Graph::sigmoid_weights`]).
    pub fn hat_graph(&self, g: &mut Graph, e: &EncSide, p: &PredSide) -> Result<(Var, Var)> {
        let t_len = g.value(e.he).rows();
        let att = g.sigmoid_attention(p.q, e.k, e.v, self.heads)?;
        let c = g.linear(att, &self.proj)?;
        let hp = g.tile_rows(p.hp, t_len)?;
        let s = g.add(hp, c)?;
        let hj = g.tanh(s);
        Ok((self.factored_graph(g, hj)?, att))
    }

    /// `h^pred′ + c^AED` per prefix row (the pre-activation shared by AED and
    /// TwA) together with the attention node.
    pub fn aed_preact(&self, g: &mut Graph, e: &EncSide, p: &PredSide, mask: Option<&[bool]>) -> Result<(Var, Var)> {
        let att = g.attention(p.q, e.k, e.v, mask, self.heads)?;
        let c = g.linear(att, &self.proj)?;
        Ok((g.add(p.hp, c)?, att))
    }

    pub fn aed_graph(&self, g: &mut Graph, preact: Var) -> Result<Var> {
        let hj = g.tanh(preact);
        self.labels_graph(g, hj)
    }

    pub fn twa_graph(&self, g: &mut Graph, e: &EncSide, preact: Var) -> Result<Var> {
        let t_len = g.value(e.he).rows();
        let u1 = g.value(preact).rows();
        let he = g.expand_rows(e.he, u1)?;
        let pc = g.tile_rows(preact, t_len)?;
        let s = g.add(he, pc)?;
        let hj = g.tanh(s);
        self.factored_graph(g, hj)
    }

    pub fn ctc_graph(&self, g: &mut Graph, e: &EncSide) -> Result<Var> {
        let half = g.scale(e.v, 0.5);
        let c = g.linear(half, &self.proj)?;
        let hj = g.tanh(c);
        self.factored_graph(g, hj)
    }

    pub fn lm_graph(&self, g: &mut Graph, p: &PredSide) -> Result<Var> {
        let hj = g.tanh(p.hp);
        self.labels_graph(g, hj)
    }
}

/// Blank logit (when the mode has one) and label logits for one joiner state.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOut {
    pub blank_logit: Option<f64>,
    pub label_logits: Vec<f64>,
}

impl HeadOut {
    pub fn blank_prob(&self) -> Option<f64> {
        self.blank_logit.map(ops::sigmoid)
    }

    pub fn log_blank(&self) -> Option<f64> {
        self.blank_logit.map(log_sigmoid)
    }

    pub fn log_not_blank(&self) -> Option<f64> {
        self.blank_logit.map(|z| log_sigmoid(-z))
    }

    pub fn label_log_probs(&self) -> Vec<f64> {
        log_softmax(&self.label_logits).expect("finite logits")
    }

    /// The full `K+1` factored log-distribution.
    pub fn factored(&self) -> Option<Vec<f64>> {
        self.blank_logit.map(|z| ops::factored_log_probs(z, &self.label_logits).expect("finite logits"))
    }
}

/// Per-frame joiner quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct EncCell {
    pub he: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-prefix joiner quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct PredCell {
    pub hp: Vec<f64>,
    pub q: Vec<f64>,
}

/// Cell-route view of a joiner.
#[derive(Clone, Copy)]
pub struct Joiner<'a> {
    pub store: &'a ParamStore,
    pub ids: &'a JoinerIds,
}

impl<'a> Joiner<'a> {
    pub fn new(store: &'a ParamStore, ids: &'a JoinerIds) -> Self {
        Self { store, ids }
    }

    fn w(&self, l: &Linear) -> &'a Tensor {
        self.store.get(l.weight)
    }

    pub fn project_features(&self, h_enc: &[f64], h_pred: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let he = affine(h_enc, self.w(&self.ids.enc), bias(self.store, &self.ids.enc))?;
        let hp = affine(h_pred, self.w(&self.ids.pred), bias(self.store, &self.ids.pred))?;
        Ok((he, hp))
    }

    /// `(q, k, v)` from projected predictor and encoder vectors.
    pub fn qkv(&self, hp: &[f64], he: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let nq = layer_norm(hp, &self.ids.ln_q.view(self.store));
        let nkv = layer_norm(he, &self.ids.ln_kv.view(self.store));
        Ok((
            linear(&nq, self.w(&self.ids.query))?,
            linear(&nkv, self.w(&self.ids.key))?,
            linear(&nkv, self.w(&self.ids.value))?,
        ))
    }

    pub fn enc_cell(&self, h_enc: &[f64]) -> Result<EncCell> {
        let he = affine(h_enc, self.w(&self.ids.enc), bias(self.store, &self.ids.enc))?;
        let nkv = layer_norm(&he, &self.ids.ln_kv.view(self.store));
        Ok(EncCell {
            k: linear(&nkv, self.w(&self.ids.key))?,
            v: linear(&nkv, self.w(&self.ids.value))?,
            he,
        })
    }

    pub fn pred_cell(&self, h_pred: &[f64]) -> Result<PredCell> {
        let hp = affine(h_pred, self.w(&self.ids.pred), bias(self.store, &self.ids.pred))?;
        let nq = layer_norm(&hp, &self.ids.ln_q.view(self.store));
        Ok(PredCell { q: linear(&nq, self.w(&self.ids.query))?, hp })
    }

    /// Projected sigmoid-attention context of one frame and the per-head weights.
    pub fn sigmoid_context(&self, q: &[f64], k: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut raw = vec![0.0; q.len()];
        let mut alpha = vec![0.0; self.ids.heads];
        ops::sigmoid_attention_cell(q, k, v, self.ids.heads, &mut raw, &mut alpha);
        Ok((linear(&raw, self.w(&self.ids.proj))?, alpha))
    }

    /// Projected softmax-attention context over the frames of `keys`/`values`
    /// selected by `allowed`, with weights `[heads × T′]`.
    pub fn softmax_context(
        &self,
        q: &[f64],
        keys: &Tensor,
        values: &Tensor,
        allowed: &[bool],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if allowed.len() != keys.rows() {
            return Err(Error::Shape("mask row length differs from frame count".into()));
        }
        if !allowed.iter().any(|&b| b) {
            return Err(Error::InvalidInput("attention mask row is empty".into()));
        }
        let heads = self.ids.heads;
        let mut raw = vec![0.0; q.len()];
        let mut weights = vec![0.0; heads * keys.rows()];
        ops::softmax_attention_row(q, keys, values, heads, |t| allowed[t], &mut raw, &mut weights);
        Ok((linear(&raw, self.w(&self.ids.proj))?, weights))
    }

    pub fn output_head(&self, hj: &[f64], want_blank: bool) -> Result<HeadOut> {
        let blank_logit = if want_blank {
            Some(dot(self.w(&self.ids.blank).data(), hj) + bias(self.store, &self.ids.blank)[0])
        } else {
            None
        };
        Ok(HeadOut { blank_logit, label_logits: self.ids.head.logits(self.store, hj)? })
    }

    /// `tanh(hp + c)`.
    pub fn state(hp: &[f64], c: &[f64]) -> Vec<f64> {
        hp.iter().zip(c).map(|(a, b)| (a + b).tanh()).collect()
    }

    /// `tanh(he + (hp + c))`.
    pub fn twa_state(he: &[f64], hp: &[f64], c: &[f64]) -> Vec<f64> {
        he.iter().zip(hp).zip(c).map(|((e, p), x)| (e + (p + x)).tanh()).collect()
    }

    pub fn hat_cell(&self, e: &EncCell, p: &PredCell) -> Result<HeadOut> {
        let (c, _) = self.sigmoid_context(&p.q, &e.k, &e.v)?;
        self.output_head(&Self::state(&p.hp, &c), true)
    }

    pub fn ctc_cell(&self, e: &EncCell) -> Result<HeadOut> {
        let half: Vec<f64> = e.v.iter().map(|x| x * 0.5).collect();
        let c = linear(&half, self.w(&self.ids.proj))?;
        let hj: Vec<f64> = c.iter().map(|x| x.tanh()).collect();
        self.output_head(&hj, true)
    }

    pub fn lm_cell(&self, p: &PredCell) -> Result<HeadOut> {
        let hj: Vec<f64> = p.hp.iter().map(|x| x.tanh()).collect();
        self.output_head(&hj, false)
    }

    /// `h^pred′ + c^AED` for one prefix against the selected frames.
    pub fn aed_preact(&self, p: &PredCell, keys: &Tensor, values: &Tensor, allowed: &[bool]) -> Result<Vec<f64>> {
        let (c, _) = self.softmax_context(&p.q, keys, values, allowed)?;
        Ok(p.hp.iter().zip(&c).map(|(a, b)| a + b).collect())
    }

    pub fn aed_cell(&self, preact: &[f64]) -> Result<HeadOut> {
        let hj: Vec<f64> = preact.iter().map(|x| x.tanh()).collect();
        self.output_head(&hj, false)
    }

    pub fn twa_cell(&self, e: &EncCell, preact: &[f64]) -> Result<HeadOut> {
        let hj: Vec<f64> = e.he.iter().zip(preact).map(|(a, b)| (a + b).tanh()).collect();
        self.output_head(&hj, true)
    }

    fn with_graph<T>(&self, f: impl FnOnce(&mut Graph) -> Result<T>) -> Result<T> {
        let mut g = Graph::new(self.store);
        f(&mut g)
    }

    fn check_widths(&self, h_enc: Option<&Tensor>, h_pred: Option<&Tensor>) -> Result<()> {
        if let Some(e) = h_enc {
            if e.cols() != self.w(&self.ids.enc).cols() {
                return Err(Error::Shape(format!("encoder width {} vs joiner input", e.cols())));
            }
        }
        if let Some(p) = h_pred {
            if p.cols() != self.w(&self.ids.pred).cols() {
                return Err(Error::Shape(format!("predictor width {} vs joiner input", p.cols())));
            }
        }
        Ok(())
    }

    /// HAT lattice `[T′, U+1, K+1]` from encoder `T′×D′` and predictor `(U+1)×D″` rows.
    pub fn hat_forward(&self, h_enc: &Tensor, h_pred: &Tensor) -> Result<PosteriorLattice> {
        self.check_widths(Some(h_enc), Some(h_pred))?;
        self.with_graph(|g| {
            let e = g.constant(h_enc.clone());
            let p = g.constant(h_pred.clone());
            let e = self.ids.enc_side(g, e)?;
            let p = self.ids.pred_side(g, p)?;
            let (lat, _) = self.ids.hat_graph(g, &e, &p)?;
            reshape3(Mode::Hat, g.value(lat), h_enc.rows(), h_pred.rows())
        })
    }

    /// AED label distributions `[U+1, K]`; `mask` is row-major `(U+1)×T′`.
    pub fn aed_forward(&self, h_enc: &Tensor, h_pred: &Tensor, mask: Option<&[bool]>) -> Result<PosteriorLattice> {
        self.check_widths(Some(h_enc), Some(h_pred))?;
        self.with_graph(|g| {
            let e = g.constant(h_enc.clone());
            let p = g.constant(h_pred.clone());
            let e = self.ids.enc_side(g, e)?;
            let p = self.ids.pred_side(g, p)?;
            let (pre, _) = self.ids.aed_preact(g, &e, &p, mask)?;
            let out = self.ids.aed_graph(g, pre)?;
            PosteriorLattice::from_log_probs(Mode::Aed, g.value(out).clone())
        })
    }

    pub fn ctc_forward(&self, h_enc: &Tensor) -> Result<PosteriorLattice> {
        self.check_widths(Some(h_enc), None)?;
        self.with_graph(|g| {
            let e = g.constant(h_enc.clone());
            let e = self.ids.enc_side(g, e)?;
            let out = self.ids.ctc_graph(g, &e)?;
            PosteriorLattice::from_log_probs(Mode::Ctc, g.value(out).clone())
        })
    }

    pub fn lm_forward(&self, h_pred: &Tensor) -> Result<PosteriorLattice> {
        self.check_widths(None, Some(h_pred))?;
        self.with_graph(|g| {
            let p = g.constant(h_pred.clone());
            let p = self.ids.pred_side(g, p)?;
            let out = self.ids.lm_graph(g, &p)?;
            PosteriorLattice::from_log_probs(Mode::Lm, g.value(out).clone())
        })
    }

    pub fn twa_forward(&self, h_enc: &Tensor, h_pred: &Tensor, mask: Option<&[bool]>) -> Result<PosteriorLattice> {
        self.check_widths(Some(h_enc), Some(h_pred))?;
        self.with_graph(|g| {
            let e = g.constant(h_enc.clone());
            let p = g.constant(h_pred.clone());
            let e = self.ids.enc_side(g, e)?;
            let p = self.ids.pred_side(g, p)?;
            let (pre, _) = self.ids.aed_preact(g, &e, &p, mask)?;
            let out = self.ids.twa_graph(g, &e, pre)?;
            reshape3(Mode::Twa, g.value(out), h_enc.rows(), h_pred.rows())
        })
    }
}

fn reshape3(mode: Mode, flat: &Tensor, t_len: usize, u1: usize) -> Result<PosteriorLattice> {
    let k1 = flat.cols();
    PosteriorLattice::from_log_probs(mode, flat.clone().reshape(vec![t_len, u1, k1])?)
}
