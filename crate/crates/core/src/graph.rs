//! Reverse-mode differentiation over batched matrix kernels.
//!
//! A [`Graph`] records every kernel applied to its inputs together with
//! whatever it needs for the backward pass. Parameters are referenced in
//! place from a borrowed [`ParamStore`]; only intermediate values are owned
//! by the graph. Every kernel supplies its own analytic backward rule.

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, gelu, gelu_grad, log_sigmoid, sigmoid, Activation};
use crate::params::{FeedForwardIds, Gradients, LayerNormIds, Linear, ParamId, ParamStore};
use crate::tensor::{dot, gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Var {
    Param(ParamId),
    Node(usize),
}

enum Op {
    Const,
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    LogSoftmax(Var),
    FactoredLogProbs { blank: Var, labels: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, weights: Vec<f64> },
    SigmoidAttention { q: Var, k: Var, v: Var, heads: usize, alpha: Vec<f64> },
    ExpandRows { x: Var, reps: usize },
    TileRows { x: Var, times: usize },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    StackRows(Vec<Var>),
    GatherRows { table: Var, ids: Vec<Option<usize>> },
    SumAll(Var),
    WeightedSum(Vec<(Var, f64)>),
    Precomputed { x: Var, grad: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match v {
            Var::Param(id) => self.store.get(id),
            Var::Node(i) => &self.nodes[i].value,
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        Var::Param(id)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var::Node(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    /// `x · wᵀ` for `x: m×k`, `w: n×k`.
    pub fn matmul_nt(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = crate::tensor::matmul_nt(self.value(x), self.value(w))?;
        Ok(self.push(out, Op::MatMulNt(x, w)))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(b);
        if xv.cols() != bv.len() {
            return shape_err(format!("add_row: {:?} + [{}]", xv.dims(), bv.len()));
        }
        let mut out = xv.clone();
        let n = bv.len();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % n];
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, name: &str) -> Result<Tensor> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.len() != bv.len() || av.rows() != bv.rows() {
            return shape_err(format!("{name}: {:?} vs {:?}", av.dims(), bv.dims()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.dims().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y, "add")?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y, "sub")?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y, "mul")?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise layer normalisation with population variance.
    pub fn layer_norm(&mut self, x: Var, p: &LayerNormIds) -> Result<Var> {
        let xv = self.value(x);
        let gain = self.store.get(p.gain).data();
        let bias = self.store.get(p.bias).data();
        let (rows, cols) = (xv.rows(), xv.cols());
        if gain.len() != cols || bias.len() != cols {
            return shape_err(format!("layer_norm: width {cols} vs gain {}", gain.len()));
        }
        let mut out = vec![0.0; rows * cols];
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + p.eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let h = (row[c] - mean) * inv;
                xhat[r * cols + c] = h;
                out[r * cols + c] = gain[c] * h + bias[c];
            }
        }
        let value = Tensor::new(xv.dims().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm { x, gain: Var::Param(p.gain), bias: Var::Param(p.bias), xhat, inv_std },
        ))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let ls = crate::ops::log_softmax(xv.row(r))?;
            out.row_mut(r).copy_from_slice(&ls);
        }
        Ok(self.push(out, Op::LogSoftmax(x)))
    }

    /// Builds `[ln σ(z), ln(1−σ(z)) + log_softmax(l)]` per row from blank
    /// logits `z: n×1` and label logits `l: n×K`.
    pub fn factored_log_probs(&mut self, blank: Var, labels: Var) -> Result<Var> {
        let zv = self.value(blank);
        let lv = self.value(labels);
        if zv.cols() != 1 || zv.rows() != lv.rows() {
            return shape_err(format!("factored_log_probs: {:?} vs {:?}", zv.dims(), lv.dims()));
        }
        let (n, k) = (lv.rows(), lv.cols());
        let mut out = Vec::with_capacity(n * (k + 1));
        for r in 0..n {
            out.extend(ops::factored_log_probs(zv.data()[r], lv.row(r))?);
        }
        let value = Tensor::matrix(n, k + 1, out)?;
        Ok(self.push(value, Op::FactoredLogProbs { blank, labels }))
    }

    /// Multi-head scaled dot-product softmax attention.
    ///
    /// `q: R×D`, `k, v: T×D`, optional `mask` is row-major `R×T` with `true`
    /// marking attendable frames. Returns the concatenated per-head contexts
    /// `R×D` (no output projection). Masked frames are skipped outright, so a
    /// row's result never depends on the values at its masked frames.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&[bool]>,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (r_len, d_model) = (qv.rows(), qv.cols());
        let t_len = kv.rows();
        if kv.cols() != d_model || vv.cols() != d_model || vv.rows() != t_len {
            return shape_err("attention: q/k/v widths differ");
        }
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!("width {d_model} not divisible by {heads} heads")));
        }
        if let Some(m) = mask {
            if m.len() != r_len * t_len {
                return shape_err("attention: mask shape");
            }
            for r in 0..r_len {
                if !m[r * t_len..(r + 1) * t_len].iter().any(|&b| b) {
                    return Err(Error::InvalidInput(format!("attention mask row {r} is empty")));
                }
            }
        }
        let mut weights = vec![0.0; r_len * heads * t_len];
        let mut out = vec![0.0; r_len * d_model];
        for r in 0..r_len {
            ops::softmax_attention_row(
                qv.row(r),
                kv,
                vv,
                heads,
                |t| mask.is_none_or(|m| m[r * t_len + t]),
                &mut out[r * d_model..(r + 1) * d_model],
                &mut weights[r * heads * t_len..(r + 1) * heads * t_len],
            );
        }
        let value = Tensor::matrix(r_len, d_model, out)?;
        Ok(self.push(value, Op::Attention { q, k, v, heads, weights }))
    }

    /// Attention weights `[R][heads][T]` recorded by an [`Graph::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match v {
            Var::Node(i) => match &self.nodes[i].op {
                Op::Attention { weights, .. } => Some(weights),
                _ => None,
            },
            Var::Param(_) => None,
        }
    }

    /// Framewise multi-head sigmoid attention over the full `(t, u)` grid.
    ///
    /// `q: U×D`, `k, v: T×D`. Row `t·U + u` of the `TU×D` result holds, per
    /// head, `σ(kₜ·q_u/√d)·vₜ`. Nothing is normalised across frames.
    pub fn sigmoid_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (u_len, d_model) = (qv.rows(), qv.cols());
        let t_len = kv.rows();
        if kv.cols() != d_model || vv.cols() != d_model || vv.rows() != t_len {
            return shape_err("sigmoid_attention: q/k/v widths differ");
        }
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!("width {d_model} not divisible by {heads} heads")));
        }
        let mut alpha = vec![0.0; t_len * u_len * heads];
        let mut out = vec![0.0; t_len * u_len * d_model];
        for t in 0..t_len {
            for u in 0..u_len {
                let cell = t * u_len + u;
                ops::sigmoid_attention_cell(
                    qv.row(u),
                    kv.row(t),
                    vv.row(t),
                    heads,
                    &mut out[cell * d_model..(cell + 1) * d_model],
                    &mut alpha[cell * heads..(cell + 1) * heads],
                );
            }
        }
        let value = Tensor::matrix(t_len * u_len, d_model, out)?;
        Ok(self.push(value, Op::SigmoidAttention { q, k, v, heads, alpha }))
    }

    /// Per-cell, per-head weights `[(t·U + u)·heads + h]` of a sigmoid attention node.
    pub fn sigmoid_weights(&self, v: Var) -> Option<&[f64]> {
        match v {
            Var::Node(i) => match &self.nodes[i].op {
                Op::SigmoidAttention { alpha, .. } => Some(alpha),
                _ => None,
            },
            Var::Param(_) => None,
        }
    }

    /// Row `t·reps + u` of the result is row `t` of `x`.
    pub fn expand_rows(&mut self, x: Var, reps: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(rows * reps * cols);
        for t in 0..rows {
            for _ in 0..reps {
                out.extend_from_slice(xv.row(t));
            }
        }
        let value = Tensor::matrix(rows * reps, cols, out)?;
        Ok(self.push(value, Op::ExpandRows { x, reps }))
    }

    /// Row `t·U + u` of the result is row `u` of `x` (with `U = x.rows()`).
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.len() * times);
        for _ in 0..times {
            out.extend_from_slice(xv.data());
        }
        let value = Tensor::matrix(xv.rows() * times, xv.cols(), out)?;
        Ok(self.push(value, Op::TileRows { x, times }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() || len == 0 {
            return shape_err("slice_rows out of range");
        }
        let c = xv.cols();
        let value = Tensor::matrix(len, c, xv.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(value, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start + len > c || len == 0 {
            return shape_err("slice_cols out of range");
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(xv.rows(), len, out)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("stack_rows of nothing");
        };
        let c = self.value(first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return shape_err("stack_rows: widths differ");
            }
            out.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let value = Tensor::matrix(rows, c, out)?;
        Ok(self.push(value, Op::StackRows(parts.to_vec())))
    }

    /// Embedding lookup; `None` selects an all-zero row.
    pub fn gather_rows(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let tv = self.value(table);
        let c = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * c);
        for id in ids {
            match *id {
                Some(i) if i < tv.rows() => out.extend_from_slice(tv.row(i)),
                Some(i) => return Err(Error::InvalidInput(format!("token id {i} out of range"))),
                None => out.extend(std::iter::repeat_n(0.0, c)),
            }
        }
        let value = Tensor::matrix(ids.len(), c, out)?;
        Ok(self.push(value, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, w) in terms {
            let val = self.value(v);
            if val.len() != 1 {
                return shape_err("weighted_sum expects scalars");
            }
            s += w * val.data()[0];
        }
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec())))
    }

    /// Scalar node whose gradient with respect to `x` was computed outside the
    /// graph (dynamic-programming losses).
    pub fn precomputed(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return shape_err("precomputed gradient shape");
        }
        Ok(self.push(Tensor::scalar(value), Op::Precomputed { x, grad }))
    }

    pub fn linear(&mut self, x: Var, p: &Linear) -> Result<Var> {
        let y = self.matmul_nt(x, Var::Param(p.weight))?;
        match p.bias {
            Some(b) => self.add_row(y, Var::Param(b)),
            None => Ok(y),
        }
    }

    pub fn feed_forward(&mut self, x: Var, p: &FeedForwardIds) -> Result<Var> {
        let h = self.matmul_nt(x, Var::Param(p.w1))?;
        let h = self.add_row(h, Var::Param(p.b1))?;
        let h = match p.activation {
            Activation::Gelu => self.gelu(h),
            Activation::Identity => h,
        };
        let y = self.matmul_nt(h, Var::Param(p.w2))?;
        self.add_row(y, Var::Param(p.b2))
    }

    /// Gradients of the scalar `root` with respect to every parameter.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self.store);
        self.backward_into(root, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates `seed · ∂root/∂θ` into `grads`.
    pub fn backward_into(&self, root: Var, seed: f64, grads: &mut Gradients) -> Result<()> {
        let Var::Node(root_idx) = root else {
            return shape_err("backward root must be a computed node");
        };
        if self.nodes[root_idx].value.len() != 1 {
            return shape_err("backward root must be a scalar");
        }
        let mut node_grads: Vec<Option<Tensor>> = Vec::with_capacity(root_idx + 1);
        node_grads.resize_with(root_idx + 1, || None);
        node_grads[root_idx] = Some(Tensor::scalar(seed));

        for i in (0..=root_idx).rev() {
            let Some(g) = node_grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut sink = Sink { node_grads: &mut node_grads, grads, graph: self };
            sink.propagate(node, &g)?;
        }
        Ok(())
    }
}

struct Sink<'a, 'g, 's> {
    node_grads: &'a mut Vec<Option<Tensor>>,
    grads: &'a mut Gradients,
    graph: &'g Graph<'s>,
}

impl Sink<'_, '_, '_> {
    fn dims(&self, v: Var) -> Vec<usize> {
        self.graph.value(v).dims().to_vec()
    }

    fn acc(&mut self, v: Var, g: &[f64]) {
        match v {
            Var::Param(id) => self.grads.accumulate(id, g),
            Var::Node(i) => {
                if matches!(self.graph.nodes[i].op, Op::Const) {
                    return;
                }
                match &mut self.node_grads[i] {
                    Some(t) => {
                        for (a, b) in t.data_mut().iter_mut().zip(g) {
                            *a += b;
                        }
                    }
                    slot @ None => {
                        let dims = self.graph.nodes[i].value.dims().to_vec();
                        *slot = Some(Tensor::new(dims, g.to_vec()).expect("gradient shape"));
                    }
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        match v {
            Var::Param(_) => true,
            Var::Node(i) => !matches!(self.graph.nodes[i].op, Op::Const),
        }
    }

    fn propagate(&mut self, node: &Node, g: &Tensor) -> Result<()> {
        let gd = g.data();
        let y = &node.value;
        match &node.op {
            Op::Const => {}
            Op::MatMulNt(x, w) => {
                let xv = self.graph.value(*x);
                let wv = self.graph.value(*w);
                let (m, k, n) = (xv.rows(), xv.cols(), wv.rows());
                if self.wants(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, gd, false, wv.data(), false, 0.0, &mut dx);
                    self.acc(*x, &dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; n * k];
                    gemm(n, m, k, gd, true, xv.data(), false, 0.0, &mut dw);
                    self.acc(*w, &dw);
                }
            }
            Op::AddRow(x, b) => {
                self.acc(*x, gd);
                let n = self.graph.value(*b).len();
                let mut db = vec![0.0; n];
                for (i, v) in gd.iter().enumerate() {
                    db[i % n] += v;
                }
                self.acc(*b, &db);
            }
            Op::Add(a, b) => {
                self.acc(*a, gd);
                self.acc(*b, gd);
            }
            Op::Sub(a, b) => {
                self.acc(*a, gd);
                let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                self.acc(*b, &neg);
            }
            Op::Mul(a, b) => {
                let av = self.graph.value(*a).data();
                let bv = self.graph.value(*b).data();
                let da: Vec<f64> = gd.iter().zip(bv).map(|(g, b)| g * b).collect();
                let db: Vec<f64> = gd.iter().zip(av).map(|(g, a)| g * a).collect();
                self.acc(*a, &da);
                self.acc(*b, &db);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = gd.iter().map(|v| v * c).collect();
                self.acc(*x, &dx);
            }
            Op::Tanh(x) => {
                let dx: Vec<f64> =
                    gd.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t)).collect();
                self.acc(*x, &dx);
            }
            Op::Sigmoid(x) => {
                let dx: Vec<f64> =
                    gd.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.acc(*x, &dx);
            }
            Op::Gelu(x) => {
                let xv = self.graph.value(*x).data();
                let dx: Vec<f64> = gd.iter().zip(xv).map(|(g, v)| g * gelu_grad(*v)).collect();
                self.acc(*x, &dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gainv = self.graph.value(*gain).data();
                let cols = gainv.len();
                let rows = gd.len() / cols;
                let mut dgain = vec![0.0; cols];
                let mut dbias = vec![0.0; cols];
                let mut dx = vec![0.0; gd.len()];
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for c in 0..cols {
                        dgain[c] += gr[c] * hr[c];
                        dbias[c] += gr[c];
                        dxhat[c] = gr[c] * gainv[c];
                        mean_d += dxhat[c];
                        mean_dh += dxhat[c] * hr[c];
                    }
                    mean_d /= cols as f64;
                    mean_dh /= cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = inv_std[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                    }
                }
                self.acc(*x, &dx);
                self.acc(*gain, &dgain);
                self.acc(*bias, &dbias);
            }
            Op::LogSoftmax(x) => {
                let cols = y.cols();
                let mut dx = vec![0.0; gd.len()];
                for r in 0..y.rows() {
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let s: f64 = gr.iter().sum();
                    for c in 0..cols {
                        dx[r * cols + c] = gr[c] - y.data()[r * cols + c].exp() * s;
                    }
                }
                self.acc(*x, &dx);
            }
            Op::FactoredLogProbs { blank, labels } => {
                let zv = self.graph.value(*blank).data();
                let k1 = y.cols();
                let k = k1 - 1;
                let n = y.rows();
                let mut dz = vec![0.0; n];
                let mut dl = vec![0.0; n * k];
                for r in 0..n {
                    let gr = &gd[r * k1..(r + 1) * k1];
                    let yr = &y.data()[r * k1..(r + 1) * k1];
                    let s = sigmoid(zv[r]);
                    let glab: f64 = gr[1..].iter().sum();
                    dz[r] = gr[0] * (1.0 - s) - glab * s;
                    // label log-softmax recovered as yr[1+j] − ln(1−σ(z))
                    let nb = log_sigmoid(-zv[r]);
                    for j in 0..k {
                        let p = (yr[1 + j] - nb).exp();
                        dl[r * k + j] = gr[1 + j] - p * glab;
                    }
                }
                self.acc(*blank, &dz);
                self.acc(*labels, &dl);
            }
            Op::Attention { q, k, v, heads, weights } => {
                let (qv, kv, vv) = (self.graph.value(*q), self.graph.value(*k), self.graph.value(*v));
                let (r_len, dm) = (qv.rows(), qv.cols());
                let t_len = kv.rows();
                let d = dm / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let mut dq = vec![0.0; r_len * dm];
                let mut dk = vec![0.0; t_len * dm];
                let mut dv = vec![0.0; t_len * dm];
                let mut da = vec![0.0; t_len];
                for h in 0..*heads {
                    let off = h * d;
                    for r in 0..r_len {
                        let w = &weights[(r * heads + h) * t_len..(r * heads + h + 1) * t_len];
                        let gr = &gd[r * dm + off..r * dm + off + d];
                        let mut s = 0.0;
                        for t in 0..t_len {
                            if w[t] == 0.0 {
                                da[t] = 0.0;
                                continue;
                            }
                            let vt = &vv.row(t)[off..off + d];
                            da[t] = dot(gr, vt);
                            s += w[t] * da[t];
                            for j in 0..d {
                                dv[t * dm + off + j] += w[t] * gr[j];
                            }
                        }
                        let qr = &qv.row(r)[off..off + d];
                        for t in 0..t_len {
                            if w[t] == 0.0 {
                                continue;
                            }
                            let ds = w[t] * (da[t] - s) * scale;
                            let kt = &kv.row(t)[off..off + d];
                            for j in 0..d {
                                dq[r * dm + off + j] += ds * kt[j];
                                dk[t * dm + off + j] += ds * qr[j];
                            }
                        }
                    }
                }
                self.acc(*q, &dq);
                self.acc(*k, &dk);
                self.acc(*v, &dv);
            }
            Op::SigmoidAttention { q, k, v, heads, alpha } => {
                let (qv, kv, vv) = (self.graph.value(*q), self.graph.value(*k), self.graph.value(*v));
                let (u_len, dm) = (qv.rows(), qv.cols());
                let t_len = kv.rows();
                let d = dm / heads;
                let scale = 1.0 / (d as f64).sqrt();
                let mut dq = vec![0.0; u_len * dm];
                let mut dk = vec![0.0; t_len * dm];
                let mut dv = vec![0.0; t_len * dm];
                for t in 0..t_len {
                    let kt = kv.row(t);
                    let vt = vv.row(t);
                    for u in 0..u_len {
                        let qu = qv.row(u);
                        let cell = t * u_len + u;
                        for h in 0..*heads {
                            let off = h * d;
                            let a = alpha[cell * heads + h];
                            let gc = &gd[cell * dm + off..cell * dm + off + d];
                            let dalpha = dot(gc, &vt[off..off + d]);
                            for j in 0..d {
                                dv[t * dm + off + j] += a * gc[j];
                            }
                            let ds = dalpha * a * (1.0 - a) * scale;
                            for j in 0..d {
                                dq[u * dm + off + j] += ds * kt[off + j];
                                dk[t * dm + off + j] += ds * qu[off + j];
                            }
                        }
                    }
                }
                self.acc(*q, &dq);
                self.acc(*k, &dk);
                self.acc(*v, &dv);
            }
            Op::ExpandRows { x, reps } => {
                let dims = self.dims(*x);
                let cols = y.cols();
                let rows = dims[0];
                let mut dx = vec![0.0; rows * cols];
                for t in 0..rows {
                    for u in 0..*reps {
                        let src = &gd[(t * reps + u) * cols..(t * reps + u + 1) * cols];
                        for (a, b) in dx[t * cols..(t + 1) * cols].iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                self.acc(*x, &dx);
            }
            Op::TileRows { x, times } => {
                let n = self.graph.value(*x).len();
                let mut dx = vec![0.0; n];
                for t in 0..*times {
                    for (a, b) in dx.iter_mut().zip(&gd[t * n..(t + 1) * n]) {
                        *a += b;
                    }
                }
                self.acc(*x, &dx);
            }
            Op::SliceRows { x, start } => {
                let xv = self.graph.value(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.acc(*x, &dx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.graph.value(*x);
                let c = xv.cols();
                let len = y.cols();
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    dx[r * c + start..r * c + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.acc(*x, &dx);
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.graph.value(p).len();
                    self.acc(p, &gd[off..off + n]);
                    off += n;
                }
            }
            Op::GatherRows { table, ids } => {
                let tv = self.graph.value(*table);
                let c = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, id) in ids.iter().enumerate() {
                    if let Some(i) = id {
                        for j in 0..c {
                            dt[i * c + j] += gd[r * c + j];
                        }
                    }
                }
                self.acc(*table, &dt);
            }
            Op::SumAll(x) => {
                let n = self.graph.value(*x).len();
                self.acc(*x, &vec![gd[0]; n]);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.acc(v, &[w * gd[0]]);
                }
            }
            Op::Precomputed { x, grad } => {
                let dx: Vec<f64> = grad.data().iter().map(|v| v * gd[0]).collect();
                self.acc(*x, &dx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_store(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for (name, dims) in shapes {
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            s.insert(*name, Tensor::new(dims.clone(), data).unwrap()).unwrap();
        }
        s
    }

    /// Checks `build` (which maps params to a scalar) against central differences.
    fn check(store: &ParamStore, build: impl Fn(&mut Graph) -> Var) {
        let f = |flat: &[f64]| {
            let mut s = store.clone();
            s.unflatten(flat);
            let mut g = Graph::new(&s);
            let out = build(&mut g);
            let v = g.value(out).data()[0];
            (v, g.backward(out).unwrap().flatten())
        };
        let r = grad_check(f, &store.flatten(), 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-6, "max rel err {} at {}", r.max_relative_error, r.worst_index);
    }

    /// Contracts a tensor node to a scalar with fixed pseudo-random weights.
    fn scalarize(g: &mut Graph, x: Var, seed: u64) -> Var {
        let dims = g.value(x).dims().to_vec();
        let n = g.value(x).len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let wv = g.constant(w);
        let prod = g.mul(x, wv).unwrap();
        g.sum_all(prod)
    }

    #[test]
    fn dense_ops_match_finite_differences() {
        let store = random_store(
            &[("x", vec![3, 4]), ("w", vec![5, 4]), ("b", vec![5]), ("y", vec![3, 5])],
            1,
        );
        let [x, w, b, y] = [0, 1, 2, 3].map(ParamId);
        check(&store, |g| {
            let h = g.matmul_nt(Var::Param(x), Var::Param(w)).unwrap();
            let h = g.add_row(h, Var::Param(b)).unwrap();
            let t = g.tanh(h);
            let s = g.sigmoid(Var::Param(y));
            let m = g.mul(t, s).unwrap();
            let e = g.gelu(m);
            let d = g.sub(e, Var::Param(y)).unwrap();
            let sc = g.scale(d, 0.7);
            let ls = g.log_softmax(sc).unwrap();
            scalarize(g, ls, 9)
        });
    }

    #[test]
    fn layer_norm_and_factored_heads_match_finite_differences() {
        let store = random_store(
            &[("x", vec![3, 6]), ("gain", vec![6]), ("bias", vec![6]), ("z", vec![3, 1]), ("l", vec![3, 4])],
            2,
        );
        let ln = LayerNormIds { gain: ParamId(1), bias: ParamId(2), eps: 1e-5 };
        check(&store, |g| {
            let y = g.layer_norm(Var::Param(ParamId(0)), &ln).unwrap();
            let f = g.factored_log_probs(Var::Param(ParamId(3)), Var::Param(ParamId(4))).unwrap();
            let a = scalarize(g, y, 3);
            let b = scalarize(g, f, 4);
            g.weighted_sum(&[(a, 1.0), (b, -0.5)]).unwrap()
        });
    }

    #[test]
    fn attention_kernels_match_finite_differences() {
        let store = random_store(&[("q", vec![3, 4]), ("k", vec![5, 4]), ("v", vec![5, 4])], 3);
        let [q, k, v] = [0, 1, 2].map(|i| Var::Param(ParamId(i)));
        let mask: Vec<bool> = (0..15).map(|i| i % 5 <= i / 5 + 1).collect();
        check(&store, |g| {
            let a = g.attention(q, k, v, Some(&mask), 2).unwrap();
            let s = g.sigmoid_attention(q, k, v, 2).unwrap();
            let a1 = scalarize(g, a, 5);
            let s1 = scalarize(g, s, 6);
            g.weighted_sum(&[(a1, 1.0), (s1, 1.0)]).unwrap()
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let store = random_store(&[("a", vec![3, 4]), ("b", vec![2, 4]), ("emb", vec![5, 4])], 4);
        let [a, b, e] = [0, 1, 2].map(|i| Var::Param(ParamId(i)));
        check(&store, |g| {
            let ea = g.expand_rows(a, 2).unwrap();
            let tb = g.tile_rows(b, 3).unwrap();
            let s = g.add(ea, tb).unwrap();
            let s = g.tanh(s);
            let r = g.slice_rows(s, 1, 3).unwrap();
            let c = g.slice_cols(r, 1, 2).unwrap();
            let emb = g.gather_rows(e, &[Some(3), None, Some(3)]).unwrap();
            let ec = g.slice_cols(emb, 0, 2).unwrap();
            let st = g.stack_rows(&[c, ec]).unwrap();
            scalarize(g, st, 7)
        });
    }

    #[test]
    fn masked_frames_do_not_influence_result() {
        let store = random_store(&[("q", vec![2, 4]), ("k", vec![3, 4]), ("v", vec![3, 4])], 5);
        let mask = vec![true, true, false, true, true, false];
        let mut g = Graph::new(&store);
        let [q, k, v] = [0, 1, 2].map(|i| Var::Param(ParamId(i)));
        let a = g.attention(q, k, v, Some(&mask), 2).unwrap();
        let base = g.value(a).clone();

        let mut s2 = store.clone();
        s2.get_mut(ParamId(1)).row_mut(2).fill(40.0);
        s2.get_mut(ParamId(2)).row_mut(2).fill(-7.0);
        let mut g2 = Graph::new(&s2);
        let a2 = g2.attention(q, k, v, Some(&mask), 2).unwrap();
        assert_eq!(&base, g2.value(a2));

        let all = vec![true; 6];
        let mut g3 = Graph::new(&store);
        let m = g3.attention(q, k, v, Some(&all), 2).unwrap();
        let n = g3.attention(q, k, v, None, 2).unwrap();
        assert_eq!(g3.value(m), g3.value(n));
    }

    #[test]
    fn empty_mask_row_is_rejected() {
        let store = random_store(&[("q", vec![1, 2]), ("k", vec![2, 2])], 6);
        let mut g = Graph::new(&store);
        let [q, k] = [0, 1].map(|i| Var::Param(ParamId(i)));
        assert!(g.attention(q, k, k, Some(&[false, false]), 1).is_err());
        assert!(matches!(g.attention(q, k, k, None, 3), Err(Error::Config(_))));
    }
}
