//! Named parameter storage and the small handle types model components use
//! to refer into it.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::ops::{Activation, FeedForwardParams, LayerNormParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named tensors. Insertion order is stable and
/// defines the checkpoint layout.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format("parameter names differ".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.dims() != b.dims() {
                return Err(Error::Format(format!("shape {:?} vs {:?}", a.dims(), b.dims())));
            }
            a.data_mut().copy_from_slice(b.data());
        }
        Ok(())
    }

    /// All values concatenated in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.tensors.iter().map(|t| Tensor::zeros(t.dims())).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.grads[id.0].data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Weight matrix `[out × in]` with optional bias `[out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNormIds {
    pub fn view<'s>(&self, store: &'s ParamStore) -> LayerNormParams<'s> {
        LayerNormParams {
            gain: store.get(self.gain).data(),
            bias: store.get(self.bias).data(),
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub activation: Activation,
}

impl FeedForwardIds {
    pub fn view<'s>(&self, store: &'s ParamStore) -> FeedForwardParams<'s> {
        FeedForwardParams {
            w1: store.get(self.w1),
            b1: store.get(self.b1).data(),
            w2: store.get(self.w2),
            b2: store.get(self.b2).data(),
            activation: self.activation,
        }
    }
}

/// Registers parameters under a common name prefix with seeded initialisation.
pub(crate) struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
    pub prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R, prefix: &str) -> Self {
        Self { store, rng, prefix: prefix.to_string() }
    }

    fn name(&self, n: &str) -> String {
        if self.prefix.is_empty() {
            n.to_string()
        } else {
            format!("{}.{n}", self.prefix)
        }
    }

    /// Glorot-uniform matrix `[rows × cols]`.
    pub fn matrix(&mut self, n: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        let name = self.name(n);
        self.store.insert(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn constant(&mut self, n: &str, dims: &[usize], value: f64) -> Result<ParamId> {
        let name = self.name(n);
        self.store.insert(name, Tensor::filled(dims, value))
    }

    pub fn linear(&mut self, n: &str, out: usize, inp: usize, bias: bool) -> Result<Linear> {
        let weight = self.matrix(&format!("{n}.weight"), out, inp)?;
        let bias = if bias { Some(self.constant(&format!("{n}.bias"), &[out], 0.0)?) } else { None };
        Ok(Linear { weight, bias })
    }

    pub fn layer_norm(&mut self, n: &str, dim: usize, eps: f64) -> Result<LayerNormIds> {
        Ok(LayerNormIds {
            gain: self.constant(&format!("{n}.gain"), &[dim], 1.0)?,
            bias: self.constant(&format!("{n}.bias"), &[dim], 0.0)?,
            eps,
        })
    }

    pub fn feed_forward(
        &mut self,
        n: &str,
        dim: usize,
        expansion: usize,
        activation: Activation,
    ) -> Result<FeedForwardIds> {
        let hidden = dim * expansion;
        Ok(FeedForwardIds {
            w1: self.matrix(&format!("{n}.w1"), hidden, dim)?,
            b1: self.constant(&format!("{n}.b1"), &[hidden], 0.0)?,
            w2: self.matrix(&format!("{n}.w2"), dim, hidden)?,
            b2: self.constant(&format!("{n}.b2"), &[dim], 0.0)?,
            activation,
        })
    }
}
