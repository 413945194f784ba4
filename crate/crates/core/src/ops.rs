//! Scalar and vector primitives shared by the batched graph kernels and the
//! cell-by-cell reference paths.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{dot, Tensor};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams<'a> {
    pub gain: &'a [f64],
    pub bias: &'a [f64],
    pub eps: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    /// Only meant for wiring tests.
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Identity => 1.0,
        }
    }
}

/// Two-layer position-wise feed-forward block: `W2·act(W1·x + b1) + b2`.
#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams<'a> {
    pub w1: &'a Tensor,
    pub b1: &'a [f64],
    pub w2: &'a Tensor,
    pub b2: &'a [f64],
    pub activation: Activation,
}

pub fn affine(x: &[f64], w: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    if w.dims().len() != 2 || w.cols() != x.len() || w.rows() != b.len() {
        return shape_err(format!(
            "affine: W {:?}, x[{}], b[{}]",
            w.dims(),
            x.len(),
            b.len()
        ));
    }
    Ok((0..w.rows()).map(|i| dot(w.row(i), x) + b[i]).collect())
}

/// `W·x` without bias.
pub fn linear(x: &[f64], w: &Tensor) -> Result<Vec<f64>> {
    if w.cols() != x.len() {
        return shape_err(format!("linear: W {:?}, x[{}]", w.dims(), x.len()));
    }
    Ok((0..w.rows()).map(|i| dot(w.row(i), x)).collect())
}

pub fn layer_norm(x: &[f64], p: &LayerNormParams<'_>) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + p.eps).sqrt();
    x.iter()
        .enumerate()
        .map(|(i, v)| p.gain[i] * ((v - mean) * inv) + p.bias[i])
        .collect()
}

/// Factored output row `[ln σ(z), ln(1−σ(z)) + log_softmax(labels)]`.
pub fn factored_log_probs(z: f64, labels: &[f64]) -> Result<Vec<f64>> {
    let ls = log_softmax(labels)?;
    let nb = log_sigmoid(-z);
    let mut out = Vec::with_capacity(labels.len() + 1);
    out.push(log_sigmoid(z));
    out.extend(ls.iter().map(|l| nb + l));
    Ok(out)
}

/// One query row of multi-head softmax attention.
///
/// Frames with `allowed(t) == false` are skipped entirely. Writes the
/// concatenated head contexts into `out` (length `D`, zeroed here) and the
/// per-head weights into `weights` (`heads × T`, masked entries left at 0).
pub fn softmax_attention_row(
    q: &[f64],
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    allowed: impl Fn(usize) -> bool,
    out: &mut [f64],
    weights: &mut [f64],
) {
    let t_len = k.rows();
    let d = q.len() / heads;
    let scale = 1.0 / (d as f64).sqrt();
    out.fill(0.0);
    weights.fill(0.0);
    let mut scores = vec![0.0; t_len];
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        let qh = &q[cols.clone()];
        let mut mx = f64::NEG_INFINITY;
        for t in 0..t_len {
            if allowed(t) {
                scores[t] = dot(qh, &k.row(t)[cols.clone()]) * scale;
                mx = mx.max(scores[t]);
            }
        }
        let mut sum = 0.0;
        for t in 0..t_len {
            if allowed(t) {
                scores[t] = (scores[t] - mx).exp();
                sum += scores[t];
            }
        }
        let w = &mut weights[h * t_len..(h + 1) * t_len];
        let o = &mut out[cols.clone()];
        for t in 0..t_len {
            if allowed(t) {
                let a = scores[t] / sum;
                w[t] = a;
                for (oj, vj) in o.iter_mut().zip(&v.row(t)[cols.clone()]) {
                    *oj += a * vj;
                }
            }
        }
    }
}

/// Framewise sigmoid attention of one query against one key/value frame.
/// Writes `σ(k·q/√d)·v` per head into `out` and the weights into `alpha`.
pub fn sigmoid_attention_cell(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    heads: usize,
    out: &mut [f64],
    alpha: &mut [f64],
) {
    let d = q.len() / heads;
    let scale = 1.0 / (d as f64).sqrt();
    for h in 0..heads {
        let cols = h * d..(h + 1) * d;
        let a = sigmoid(dot(&k[cols.clone()], &q[cols.clone()]) * scale);
        alpha[h] = a;
        for (oj, vj) in out[cols.clone()].iter_mut().zip(&v[cols]) {
            *oj = a * vj;
        }
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `ln(eᵃ + eᵇ)` with `-∞` as the additive identity.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() || m == f64::NEG_INFINITY {
        return Err(Error::InvalidInput("softmax over no finite entries".into()));
    }
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v.is_empty() || m == f64::NEG_INFINITY {
        return Err(Error::InvalidInput("log_softmax over no finite entries".into()));
    }
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    Ok(v.iter().map(|x| x - lse).collect())
}

pub fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(s)` without cancellation for large `|s|`.
pub fn log_sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        -(-s).exp().ln_1p()
    } else {
        s - s.exp().ln_1p()
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn feed_forward(x: &[f64], p: &FeedForwardParams<'_>) -> Result<Vec<f64>> {
    let hidden: Vec<f64> = affine(x, p.w1, p.b1)?
        .into_iter()
        .map(|h| p.activation.apply(h))
        .collect();
    affine(&hidden, p.w2, p.b2)
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Index of the parameter with the largest error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Largest `|analytic − numeric| / max(1, |analytic|)` over all parameters,
/// with the numeric gradient taken by central differences of step `eps`.
///
/// `f` returns the scalar value and its analytic gradient.
pub fn grad_check<F>(f: F, params: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (value, analytic) = f(params);
    if !value.is_finite() {
        return Err(Error::Numerical(format!("loss is not finite: {value}")));
    }
    if analytic.len() != params.len() {
        return shape_err("gradient length differs from parameter count");
    }
    let mut work = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut worst = (0.0, 0);
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + eps;
        let (plus, _) = f(&work);
        work[i] = orig - eps;
        let (minus, _) = f(&work);
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!("perturbed loss not finite at parameter {i}")));
        }
        let g = (plus - minus) / (2.0 * eps);
        let err = (analytic[i] - g).abs() / analytic[i].abs().max(1.0);
        if err > worst.0 {
            worst = (err, i);
        }
        numeric.push(g);
    }
    Ok(GradCheckReport { max_relative_error: worst.0, worst_index: worst.1, analytic, numeric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn affine_examples() {
        let w = Tensor::matrix(2, 2, vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(affine(&[1.0, 1.0], &w, &[1.0, 0.0]).unwrap(), vec![3.0, 2.0]);
        assert_eq!(affine(&[0.0, 0.0], &w, &[0.5, -0.5]).unwrap(), vec![0.5, -0.5]);
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(affine(&[1.0, 2.0], &eye, &[0.0, 0.0]).unwrap(), vec![1.0, 2.0]);
        assert!(affine(&[1.0], &w, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = [1.0; 4];
        let zeros = [0.0; 4];
        let p = LayerNormParams { gain: &ones, bias: &zeros, eps: DEFAULT_LN_EPS };
        assert!(layer_norm(&[3.0; 4], &p).iter().all(|&v| v == 0.0));

        let p2 = LayerNormParams { gain: &ones[..2], bias: &zeros[..2], eps: 1e-300 };
        let y = layer_norm(&[1.0, -1.0], &p2);
        assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] + 1.0).abs() < 1e-12);

        let bias = [0.3, -0.7, 1.1, 2.0];
        let p3 = LayerNormParams { gain: &zeros, bias: &bias, eps: DEFAULT_LN_EPS };
        assert_eq!(layer_norm(&[5.0, 1.0, -2.0, 0.1], &p3), bias.to_vec());
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&[0.3; 5]).unwrap();
        assert!(u.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        let big = softmax(&[1000.0, 0.0]).unwrap();
        assert!((big[0] - 1.0).abs() < 1e-15 && big[1] < 1e-300);
        let p = softmax(&[1.0f64.ln(), 3.0f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
        assert!(softmax(&[f64::NEG_INFINITY; 3]).is_err());
        let partial = softmax(&[f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(partial, vec![0.0, 1.0]);
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) - 0.7310585786).abs() < 1e-10);
        for s in [0.1, 2.5, 30.0, 700.0] {
            assert!((sigmoid(s) + sigmoid(-s) - 1.0).abs() < 1e-15);
        }
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn feed_forward_identity_wiring() {
        let eye = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let p = FeedForwardParams {
            w1: &eye,
            b1: &[0.0],
            w2: &eye,
            b2: &[0.0],
            activation: Activation::Identity,
        };
        assert_eq!(feed_forward(&[2.0], &p).unwrap(), vec![2.0]);

        let z = Tensor::zeros(&[6, 3]);
        let z2 = Tensor::zeros(&[3, 6]);
        let p0 = FeedForwardParams {
            w1: &z,
            b1: &[0.0; 6],
            w2: &z2,
            b2: &[0.0; 3],
            activation: Activation::Gelu,
        };
        assert_eq!(feed_forward(&[1.0, -2.0, 3.0], &p0).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn grad_check_closed_forms() {
        let sq = |w: &[f64]| (w[0] * w[0], vec![2.0 * w[0]]);
        let r = grad_check(sq, &[3.0], 1e-5).unwrap();
        assert_eq!(r.analytic[0], 6.0);
        assert!(r.max_relative_error < 1e-8);

        let c = |_: &[f64]| (4.0, vec![0.0, 0.0]);
        let r = grad_check(c, &[1.0, 2.0], 1e-5).unwrap();
        assert_eq!(r.numeric, vec![0.0, 0.0]);

        let bad = |_: &[f64]| (f64::NAN, vec![0.0]);
        assert!(grad_check(bad, &[1.0], 1e-5).is_err());
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for x in [-3.0, -0.5, 0.0, 0.7, 2.0] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_permutation_equivariant(
            v in proptest::collection::vec(-50.0f64..50.0, 1..12),
            rot in 0usize..12,
        ) {
            let p = softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let r = rot % v.len();
            let mut vr = v.clone();
            vr.rotate_left(r);
            let mut pr = p.clone();
            pr.rotate_left(r);
            for (a, b) in softmax(&vr).unwrap().iter().zip(&pr) {
                prop_assert!((a - b).abs() <= 1e-14 * b.max(1e-300) + 1e-300);
            }
        }

        #[test]
        fn layer_norm_shift_invariant(
            v in proptest::collection::vec(-10.0f64..10.0, 2..10),
            shift in -5.0f64..5.0,
        ) {
            let gain: Vec<f64> = (0..v.len()).map(|i| 0.5 + i as f64 * 0.1).collect();
            let bias: Vec<f64> = (0..v.len()).map(|i| i as f64 * -0.2).collect();
            let p = LayerNormParams { gain: &gain, bias: &bias, eps: DEFAULT_LN_EPS };
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            let a = layer_norm(&v, &p);
            let b = layer_norm(&shifted, &p);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()) * 10.0);
            }
        }
    }
}
