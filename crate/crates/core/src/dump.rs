//! Attention and posterior series along the greedy HAT path, written as CSV
//! for re-plotting: per frame the non-blank probability and the sigmoid
//! attention weights of the first cell visited at that frame, and per emitted
//! token the head-averaged AED attention row.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use crate::decode::{greedy_frame_sync, DecodeConfig, DecodeMode, FrameScorer, FrameScores, ModelScorer, PrefixState};
use crate::encoder::ChunkConfig;
use crate::error::Result;
use crate::model::AioModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRow {
    /// Prefix length of the cell.
    pub u: usize,
    pub non_blank: f64,
    /// One weight per joiner head.
    pub sigmoid: Vec<f64>,
}

impl FrameRow {
    pub fn sigmoid_mean(&self) -> f64 {
        self.sigmoid.iter().sum::<f64>() / self.sigmoid.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    /// Greedy HAT hypothesis.
    pub tokens: Vec<usize>,
    /// One row per encoder frame.
    pub frames: Vec<FrameRow>,
    /// Frame at which each token was emitted.
    pub emit_frames: Vec<usize>,
    /// One row per token, one column per frame.
    pub aed: Vec<Vec<f64>>,
}

impl AttentionDump {
    pub fn non_blank_series(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.non_blank).collect()
    }

    pub fn sigmoid_series(&self) -> Vec<f64> {
        self.frames.iter().map(FrameRow::sigmoid_mean).collect()
    }
}

/// Wraps a scorer and remembers the path greedy decoding takes.
struct Recorder<'s, 'a> {
    inner: &'s mut ModelScorer<'a>,
    states: Vec<Rc<PrefixState>>,
    first: Vec<Option<Rc<PrefixState>>>,
    emit_frames: Vec<usize>,
    t: usize,
}

impl FrameScorer for Recorder<'_, '_> {
    type State = Rc<PrefixState>;

    fn num_frames(&self) -> usize {
        self.inner.num_frames()
    }

    fn eos(&self) -> Option<usize> {
        FrameScorer::eos(self.inner)
    }

    fn initial(&mut self) -> Result<Self::State> {
        let s = FrameScorer::initial(self.inner)?;
        self.states.push(s.clone());
        Ok(s)
    }

    fn extend(&mut self, state: &Self::State, token: usize) -> Result<Self::State> {
        let s = FrameScorer::extend(self.inner, state, token)?;
        self.states.push(s.clone());
        self.emit_frames.push(self.t);
        Ok(s)
    }

    fn frame_scores(&mut self, state: &Self::State, t: usize) -> Result<FrameScores> {
        self.t = t;
        if self.first[t].is_none() {
            self.first[t] = Some(state.clone());
        }
        self.inner.frame_scores(state, t)
    }
}

/// Greedy HAT decoding of `x` with the per-frame and per-token attention
/// series; `chunk` selects streaming operation.
pub fn attention_dump(model: &AioModel, x: &Tensor, chunk: Option<ChunkConfig>, max_symbols_per_frame: usize) -> Result<AttentionDump> {
    let cfg = DecodeConfig { mode: DecodeMode::Hat, beam: 1, chunk, max_symbols_per_frame, ..DecodeConfig::default() };
    let mut scorer = ModelScorer::new(model, x, &cfg, None)?;
    let t_len = scorer.num_frames();
    let mut rec = Recorder { inner: &mut scorer, states: Vec::new(), first: vec![None; t_len], emit_frames: Vec::new(), t: 0 };
    let tokens = greedy_frame_sync(&mut rec, max_symbols_per_frame)?;
    let Recorder { states, first, emit_frames, .. } = rec;
    let last = states.last().cloned();

    let mut frames = Vec::with_capacity(t_len);
    for (t, s) in first.into_iter().enumerate() {
        // frames after an EOS stop stay on the final prefix
        let s = s.or_else(|| last.clone()).expect("initial state exists");
        let head = scorer.hat_cell(&s, t)?;
        frames.push(FrameRow {
            u: states.iter().position(|p| Rc::ptr_eq(p, &s)).unwrap_or(tokens.len()),
            non_blank: 1.0 - head.blank_prob().expect("HAT has a blank"),
            sigmoid: scorer.sigmoid_weights(&s, t)?,
        });
    }
    let aed = emit_frames
        .iter()
        .enumerate()
        .map(|(u, &t)| scorer.aed_weights(&states[u], scorer.aed_limit(t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionDump { tokens, frames, emit_frames, aed })
}

/// Writes `non_blank.csv` and `sigmoid_attention.csv` (one row per frame)
/// and `aed_attention.csv` (one row per emitted token).
pub fn write_dump(dir: &Path, d: &AttentionDump) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut nb = String::from("t,u,non_blank\n");
    let heads = d.frames.first().map_or(0, |f| f.sigmoid.len());
    let mut sig = String::from("t,u,mean");
    for h in 0..heads {
        sig.push_str(&format!(",head{h}"));
    }
    sig.push('\n');
    for (t, f) in d.frames.iter().enumerate() {
        nb.push_str(&format!("{t},{},{}\n", f.u, f.non_blank));
        sig.push_str(&format!("{t},{},{}", f.u, f.sigmoid_mean()));
        for w in &f.sigmoid {
            sig.push_str(&format!(",{w}"));
        }
        sig.push('\n');
    }
    let mut aed = String::from("u,token,emit_frame");
    for t in 0..d.frames.len() {
        aed.push_str(&format!(",t{t}"));
    }
    aed.push('\n');
    for (u, row) in d.aed.iter().enumerate() {
        aed.push_str(&format!("{u},{},{}", d.tokens[u], d.emit_frames[u]));
        for w in row {
            aed.push_str(&format!(",{w}"));
        }
        aed.push('\n');
    }
    fs::write(dir.join("non_blank.csv"), nb)?;
    fs::write(dir.join("sigmoid_attention.csv"), sig)?;
    fs::write(dir.join("aed_attention.csv"), aed)?;
    Ok(())
}

/// Sample correlation; `None` when either series is constant or the lengths
/// differ.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}
