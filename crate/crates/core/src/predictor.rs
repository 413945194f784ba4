//! Gated-recurrent label predictor.
//!
//! The start symbol is an all-zero embedding and the initial state is zero.
//! Row `u` of the predictor output is the top-layer state after consuming
//! `[start, y₁, …, y_u]`, so a transcript of length `U` yields `U+1` rows.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{affine, sigmoid};
use crate::params::{Builder, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GruIds {
    /// `[3H × in]`, gate order reset, update, candidate.
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
}

#[derive(Clone, Debug)]
pub struct PredictorIds {
    pub embed: ParamId,
    pub layers: Vec<GruIds>,
    pub hidden: usize,
}

/// Recurrent state after a label prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorState {
    layers: Vec<Vec<f64>>,
    len: usize,
}

impl PredictorState {
    /// Number of symbols consumed, counting the start symbol.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Top-layer state.
    pub fn output(&self) -> &[f64] {
        self.layers.last().expect("at least one layer")
    }
}

impl PredictorIds {
    pub(crate) fn build<R: Rng>(
        b: &mut Builder<'_, R>,
        vocab: usize,
        embed_dim: usize,
        hidden: usize,
        layers: usize,
    ) -> Result<Self> {
        let embed = b.matrix("embed", vocab, embed_dim)?;
        let mut out = Vec::with_capacity(layers);
        for i in 0..layers {
            let inp = if i == 0 { embed_dim } else { hidden };
            out.push(GruIds {
                w_ih: b.matrix(&format!("gru{i}.w_ih"), 3 * hidden, inp)?,
                w_hh: b.matrix(&format!("gru{i}.w_hh"), 3 * hidden, hidden)?,
                b_ih: b.constant(&format!("gru{i}.b_ih"), &[3 * hidden], 0.0)?,
                b_hh: b.constant(&format!("gru{i}.b_hh"), &[3 * hidden], 0.0)?,
            });
        }
        Ok(Self { embed, layers: out, hidden })
    }

    pub fn vocab(&self, store: &ParamStore) -> usize {
        store.get(self.embed).rows()
    }

    pub fn initial_state(&self) -> PredictorState {
        PredictorState { layers: vec![vec![0.0; self.hidden]; self.layers.len()], len: 0 }
    }

    /// Advances the state by one symbol (`None` = start symbol) and returns the
    /// new top-layer output.
    pub fn step(
        &self,
        store: &ParamStore,
        prev: Option<usize>,
        state: &PredictorState,
    ) -> Result<(Vec<f64>, PredictorState)> {
        let table = store.get(self.embed);
        let mut x = match prev {
            None => vec![0.0; table.cols()],
            Some(id) if id < table.rows() => table.row(id).to_vec(),
            Some(id) => return Err(Error::InvalidInput(format!("token id {id} out of range"))),
        };
        let h_dim = self.hidden;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, ids) in self.layers.iter().enumerate() {
            let h = &state.layers[l];
            let xi = affine(&x, store.get(ids.w_ih), store.get(ids.b_ih).data())?;
            let hh = affine(h, store.get(ids.w_hh), store.get(ids.b_hh).data())?;
            let mut next = vec![0.0; h_dim];
            for j in 0..h_dim {
                let r = sigmoid(xi[j] + hh[j]);
                let z = sigmoid(xi[h_dim + j] + hh[h_dim + j]);
                let n = (xi[2 * h_dim + j] + r * hh[2 * h_dim + j]).tanh();
                next[j] = n + z * (h[j] - n);
            }
            layers.push(next.clone());
            x = next;
        }
        Ok((x, PredictorState { layers, len: state.len + 1 }))
    }

    /// Replays `[start, prefix…]` from the initial state.
    pub fn state_for(&self, store: &ParamStore, prefix: &[usize]) -> Result<PredictorState> {
        let (_, mut st) = self.step(store, None, &self.initial_state())?;
        for &y in prefix {
            st = self.step(store, Some(y), &st)?.1;
        }
        Ok(st)
    }

    /// Batched predictor over `[start, y₁…y_U]`, returning `(U+1)×H`.
    pub fn forward(&self, g: &mut Graph, y: &[usize]) -> Result<Var> {
        let ids: Vec<Option<usize>> = std::iter::once(None).chain(y.iter().map(|&v| Some(v))).collect();
        let steps = ids.len();
        let h_dim = self.hidden;
        let mut x = g.gather_rows(Var::Param(self.embed), &ids)?;
        for l in &self.layers {
            let xi = g.linear(x, &crate::params::Linear { weight: l.w_ih, bias: Some(l.b_ih) })?;
            let rec = crate::params::Linear { weight: l.w_hh, bias: Some(l.b_hh) };
            let mut h = g.constant(Tensor::zeros(&[1, h_dim]));
            let mut outs = Vec::with_capacity(steps);
            for s in 0..steps {
                let xs = g.slice_rows(xi, s, 1)?;
                let hh = g.linear(h, &rec)?;
                let gate = |g: &mut Graph, i: usize| -> Result<(Var, Var)> {
                    Ok((g.slice_cols(xs, i * h_dim, h_dim)?, g.slice_cols(hh, i * h_dim, h_dim)?))
                };
                let (xr, hr) = gate(g, 0)?;
                let pre = g.add(xr, hr)?;
                let r = g.sigmoid(pre);
                let (xz, hz) = gate(g, 1)?;
                let pre = g.add(xz, hz)?;
                let z = g.sigmoid(pre);
                let (xn, hn) = gate(g, 2)?;
                let rh = g.mul(r, hn)?;
                let pre = g.add(xn, rh)?;
                let n = g.tanh(pre);
                let diff = g.sub(h, n)?;
                let zd = g.mul(z, diff)?;
                h = g.add(n, zd)?;
                outs.push(h);
            }
            x = g.stack_rows(&outs)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, PredictorIds) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut b = Builder::new(&mut store, &mut rng, "pred");
        let ids = PredictorIds::build(&mut b, 5, 6, 7, 2).unwrap();
        (store, ids)
    }

    #[test]
    fn incremental_matches_replay_and_batch() {
        let (store, ids) = setup();
        let y = [3, 1, 4, 1];
        let mut g = Graph::new(&store);
        let batch = ids.forward(&mut g, &y).unwrap();
        let batch = g.value(batch).clone();
        assert_eq!(batch.dims(), &[5, 7]);

        let (mut h, mut st) = ids.step(&store, None, &ids.initial_state()).unwrap();
        assert_eq!(batch.row(0), h.as_slice());
        for (u, &tok) in y.iter().enumerate() {
            (h, st) = ids.step(&store, Some(tok), &st).unwrap();
            assert_eq!(batch.row(u + 1), h.as_slice());
            let replay = ids.state_for(&store, &y[..=u]).unwrap();
            assert_eq!(replay, st);
        }
        assert_eq!(st.len(), 5);
    }

    #[test]
    fn start_state_is_zero_and_prefixes_differ() {
        let (store, ids) = setup();
        assert!(ids.initial_state().layers.iter().flatten().all(|&v| v == 0.0));
        let a = ids.state_for(&store, &[0, 1]).unwrap();
        let b = ids.state_for(&store, &[1, 0]).unwrap();
        assert_ne!(a.output(), b.output());
        assert!(ids.step(&store, Some(5), &a).is_err());
    }
}
