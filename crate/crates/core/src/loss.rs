//! Exact dynamic-programming sequence losses and cross-entropy.
//!
//! All losses are negative log-likelihoods computed in the log domain. The
//! returned gradient is taken with respect to the lattice's log-probabilities
//! (same shape as the lattice); multiply by `1/p` for the gradient with respect
//! to probabilities.

use std::fmt;

use crate::error::{Error, Result};
use crate::lattice::{Mode, PosteriorLattice};
use crate::ops::log_add;
use crate::tensor::Tensor;

const NEG_INF: f64 = f64::NEG_INFINITY;

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

impl LossValue {
    pub fn is_feasible(&self) -> bool {
        self.value.is_finite()
    }

    fn infeasible(dims: &[usize]) -> Self {
        Self { value: f64::INFINITY, grad: Tensor::zeros(dims) }
    }
}

fn check_tokens(y: &[usize], k: usize) -> Result<()> {
    match y.iter().find(|&&v| v >= k) {
        Some(v) => Err(Error::InvalidInput(format!("token {v} outside vocabulary of {k}"))),
        None => Ok(()),
    }
}

/// Forward and backward variables of a transducer lattice.
///
/// `alpha(t, u)` is the log-probability of reaching node `(t, u)`;
/// `beta(t, u)` the log-probability of completing the target from it,
/// including the final blank.
#[derive(Clone, Debug)]
pub struct TransducerFb {
    t_len: usize,
    u1: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_likelihood: f64,
}

impl TransducerFb {
    /// Runs the recursions on a flat `[T′·(U+1)·(K+1)]` log-probability array.
    pub fn compute(logp: &[f64], t_len: usize, k1: usize, y: &[usize]) -> Self {
        let u1 = y.len() + 1;
        let lp = |t: usize, u: usize, j: usize| logp[(t * u1 + u) * k1 + j];
        let blank = |t: usize, u: usize| lp(t, u, 0);
        let label = |t: usize, u: usize| lp(t, u, 1 + y[u]);
        let at = |t: usize, u: usize| t * u1 + u;

        let mut alpha = vec![NEG_INF; t_len * u1];
        for t in 0..t_len {
            for u in 0..u1 {
                alpha[at(t, u)] = if t == 0 && u == 0 {
                    0.0
                } else {
                    let from_t = if t > 0 { alpha[at(t - 1, u)] + blank(t - 1, u) } else { NEG_INF };
                    let from_u = if u > 0 { alpha[at(t, u - 1)] + label(t, u - 1) } else { NEG_INF };
                    log_add(from_t, from_u)
                };
            }
        }
        let mut beta = vec![NEG_INF; t_len * u1];
        for t in (0..t_len).rev() {
            for u in (0..u1).rev() {
                beta[at(t, u)] = if t == t_len - 1 && u == u1 - 1 {
                    blank(t, u)
                } else {
                    let to_t = if t + 1 < t_len { beta[at(t + 1, u)] + blank(t, u) } else { NEG_INF };
                    let to_u = if u + 1 < u1 { beta[at(t, u + 1)] + label(t, u) } else { NEG_INF };
                    log_add(to_t, to_u)
                };
            }
        }
        let log_likelihood = alpha[at(t_len - 1, u1 - 1)] + blank(t_len - 1, u1 - 1);
        Self { t_len, u1, alpha, beta, log_likelihood }
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn u1(&self) -> usize {
        self.u1
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn alpha(&self, t: usize, u: usize) -> f64 {
        self.alpha[t * self.u1 + u]
    }

    pub fn beta(&self, t: usize, u: usize) -> f64 {
        self.beta[t * self.u1 + u]
    }
}

/// Flat-array transducer loss; `logp` is `[T′·(U+1)·(K+1)]` with `U = y.len()`.
pub fn transducer_loss_raw(logp: &[f64], t_len: usize, k1: usize, y: &[usize]) -> (f64, Vec<f64>) {
    let u1 = y.len() + 1;
    let fb = TransducerFb::compute(logp, t_len, k1, y);
    let ll = fb.log_likelihood;
    let mut grad = vec![0.0; logp.len()];
    if !ll.is_finite() {
        return (f64::INFINITY, grad);
    }
    for t in 0..t_len {
        for u in 0..u1 {
            let base = (t * u1 + u) * k1;
            let a = fb.alpha(t, u);
            if a == NEG_INF {
                continue;
            }
            let after_blank = if t + 1 < t_len {
                fb.beta(t + 1, u)
            } else if u == u1 - 1 {
                0.0
            } else {
                NEG_INF
            };
            if after_blank > NEG_INF {
                grad[base] = -(a + logp[base] + after_blank - ll).exp();
            }
            if u + 1 < u1 {
                let j = base + 1 + y[u];
                grad[j] = -(a + logp[j] + fb.beta(t, u + 1) - ll).exp();
            }
        }
    }
    (-ll, grad)
}

/// Negative log-likelihood of `y` (EOS-free) under a HAT or TwA lattice,
/// summed over every monotone alignment.
pub fn transducer_loss(lat: &PosteriorLattice, y: &[usize]) -> Result<LossValue> {
    if !matches!(lat.mode(), Mode::Hat | Mode::Twa) {
        return Err(Error::InvalidInput(format!("transducer loss on a {} lattice", lat.mode())));
    }
    let dims = lat.dims();
    let (t_len, u1, k1) = (dims[0], dims[1], dims[2]);
    if u1 != y.len() + 1 {
        return Err(Error::Shape(format!("lattice has {u1} label rows for {} tokens", y.len())));
    }
    check_tokens(y, k1 - 1)?;
    let (value, grad) = transducer_loss_raw(lat.log_probs().data(), t_len, k1, y);
    if !value.is_finite() {
        return Ok(LossValue::infeasible(dims));
    }
    Ok(LossValue { value, grad: Tensor::new(dims.to_vec(), grad)? })
}

/// Forward/backward variables of CTC over the blank-augmented target.
///
/// `beta(t, s)` excludes the emission at `t`, so `alpha + beta − ll` is the
/// log-posterior of occupying state `s` at frame `t`.
#[derive(Clone, Debug)]
pub struct CtcFb {
    s_len: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_likelihood: f64,
}

impl CtcFb {
    pub fn compute(logp: &[f64], t_len: usize, k1: usize, y: &[usize]) -> Self {
        let s_len = 2 * y.len() + 1;
        // state s emits blank for even s, y[(s-1)/2] otherwise
        let sym = |s: usize| if s.is_multiple_of(2) { 0 } else { 1 + y[s / 2] };
        let skip_ok = |s: usize| s >= 2 && s % 2 == 1 && sym(s) != sym(s - 2);
        let lp = |t: usize, s: usize| logp[t * k1 + sym(s)];

        let mut alpha = vec![NEG_INF; t_len * s_len];
        alpha[0] = lp(0, 0);
        if s_len > 1 {
            alpha[1] = lp(0, 1);
        }
        for t in 1..t_len {
            for s in 0..s_len {
                let prev = &alpha[(t - 1) * s_len..t * s_len];
                let mut a = prev[s];
                if s >= 1 {
                    a = log_add(a, prev[s - 1]);
                }
                if skip_ok(s) {
                    a = log_add(a, prev[s - 2]);
                }
                alpha[t * s_len + s] = if a == NEG_INF { NEG_INF } else { a + lp(t, s) };
            }
        }
        let mut beta = vec![NEG_INF; t_len * s_len];
        beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
        if s_len > 1 {
            beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
        }
        for t in (0..t_len.saturating_sub(1)).rev() {
            for s in 0..s_len {
                let next = |s2: usize| beta[(t + 1) * s_len + s2] + lp(t + 1, s2);
                let mut b = next(s);
                if s + 1 < s_len {
                    b = log_add(b, next(s + 1));
                }
                if s + 2 < s_len && skip_ok(s + 2) {
                    b = log_add(b, next(s + 2));
                }
                beta[t * s_len + s] = b;
            }
        }
        let last = &alpha[(t_len - 1) * s_len..];
        let mut ll = last[s_len - 1];
        if s_len > 1 {
            ll = log_add(ll, last[s_len - 2]);
        }
        Self { s_len, alpha, beta, log_likelihood: ll }
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    pub fn log_posterior(&self, t: usize, s: usize) -> f64 {
        let i = t * self.s_len + s;
        self.alpha[i] + self.beta[i] - self.log_likelihood
    }
}

pub fn ctc_loss_raw(logp: &[f64], t_len: usize, k1: usize, y: &[usize]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; logp.len()];
    let fb = CtcFb::compute(logp, t_len, k1, y);
    if !fb.log_likelihood.is_finite() {
        return (f64::INFINITY, grad);
    }
    for t in 0..t_len {
        for s in 0..fb.s_len {
            let lp = fb.log_posterior(t, s);
            if lp > NEG_INF {
                let k = if s % 2 == 0 { 0 } else { 1 + y[s / 2] };
                grad[t * k1 + k] -= lp.exp();
            }
        }
    }
    (-fb.log_likelihood, grad)
}

/// Connectionist temporal classification loss of `y` (EOS-free).
pub fn ctc_loss(lat: &PosteriorLattice, y: &[usize]) -> Result<LossValue> {
    if lat.mode() != Mode::Ctc {
        return Err(Error::InvalidInput(format!("ctc loss on a {} lattice", lat.mode())));
    }
    let dims = lat.dims();
    let (t_len, k1) = (dims[0], dims[1]);
    check_tokens(y, k1 - 1)?;
    let (value, grad) = ctc_loss_raw(lat.log_probs().data(), t_len, k1, y);
    if !value.is_finite() {
        return Ok(LossValue::infeasible(dims));
    }
    Ok(LossValue { value, grad: Tensor::new(dims.to_vec(), grad)? })
}

pub fn cross_entropy_raw(logp: &[f64], k: usize, targets: &[usize]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; logp.len()];
    let mut value = 0.0;
    for (u, &y) in targets.iter().enumerate() {
        value -= logp[u * k + y];
        grad[u * k + y] = -1.0;
    }
    if !value.is_finite() {
        return (f64::INFINITY, vec![0.0; logp.len()]);
    }
    (value, grad)
}

/// Summed teacher-forced cross-entropy; `targets` is the transcript followed by
/// EOS, one entry per lattice row.
pub fn cross_entropy_loss(lat: &PosteriorLattice, targets: &[usize]) -> Result<LossValue> {
    if !matches!(lat.mode(), Mode::Aed | Mode::Lm) {
        return Err(Error::InvalidInput(format!("cross-entropy on a {} lattice", lat.mode())));
    }
    let dims = lat.dims();
    if dims[0] != targets.len() {
        return Err(Error::Shape(format!("{} rows for {} targets", dims[0], targets.len())));
    }
    check_tokens(targets, dims[1])?;
    let (value, grad) = cross_entropy_raw(lat.log_probs().data(), dims[1], targets);
    if !value.is_finite() {
        return Ok(LossValue::infeasible(dims));
    }
    Ok(LossValue { value, grad: Tensor::new(dims.to_vec(), grad)? })
}

/// The nine per-utterance loss terms of joint dual-mode training.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub hat_off: f64,
    pub aed_off: f64,
    pub ctc_off: f64,
    pub twa_off: f64,
    pub hat_str: f64,
    pub aed_str: f64,
    pub ctc_str: f64,
    pub twa_str: f64,
    pub lm: f64,
}

impl LossComponents {
    pub const NAMES: [&'static str; 9] = [
        "L_hat_off", "L_aed_off", "L_ctc_off", "L_twa_off", "L_hat_str", "L_aed_str", "L_ctc_str",
        "L_twa_str", "L_lm",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.hat_off, self.aed_off, self.ctc_off, self.twa_off, self.hat_str, self.aed_str,
            self.ctc_str, self.twa_str, self.lm,
        ]
    }

    pub fn from_values(v: [f64; 9]) -> Self {
        Self {
            hat_off: v[0],
            aed_off: v[1],
            ctc_off: v[2],
            twa_off: v[3],
            hat_str: v[4],
            aed_str: v[5],
            ctc_str: v[6],
            twa_str: v[7],
            lm: v[8],
        }
    }

    pub fn offline(&self) -> f64 {
        self.hat_off + self.aed_off + self.ctc_off + self.twa_off
    }

    pub fn streaming(&self) -> f64 {
        self.hat_str + self.aed_str + self.ctc_str + self.twa_str
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.values().iter().position(|v| !v.is_finite()).map(|i| Self::NAMES[i])
    }

    pub fn add(&mut self, other: &LossComponents) {
        let mut v = self.values();
        for (a, b) in v.iter_mut().zip(other.values()) {
            *a += b;
        }
        *self = Self::from_values(v);
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_values(self.values().map(|v| v * s))
    }
}

impl fmt::Display for LossComponents {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (n, v)) in Self::NAMES.iter().zip(self.values()).enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{n}={v:.4}")?;
        }
        Ok(())
    }
}

/// `offline + streaming + λ·lm`. When `λ = 0` the LM term is dropped even if it
/// is not finite.
pub fn combined_loss(c: &LossComponents, lambda: f64) -> f64 {
    let lm = if lambda == 0.0 { 0.0 } else { lambda * c.lm };
    let total = c.offline() + c.streaming() + lm;
    if !total.is_finite() {
        if let Some(name) = c.first_non_finite() {
            log::warn!("non-finite loss component {name}");
        }
        return f64::INFINITY;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::log_softmax;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logp(rng: &mut impl Rng, cells: usize, width: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(cells * width);
        for _ in 0..cells {
            let logits: Vec<f64> = (0..width).map(|_| rng.random_range(-2.0..2.0)).collect();
            out.extend(log_softmax(&logits).unwrap());
        }
        out
    }

    /// Sum over every alignment path, enumerated explicitly.
    fn transducer_brute(logp: &[f64], t_len: usize, k1: usize, y: &[usize]) -> f64 {
        let u1 = y.len() + 1;
        fn walk(lp: &dyn Fn(usize, usize, usize) -> f64, t: usize, u: usize, t_len: usize, y: &[usize], acc: f64) -> f64 {
            let u1 = y.len() + 1;
            let mut total = 0.0;
            if t == t_len - 1 && u == u1 - 1 {
                return acc * lp(t, u, 0).exp();
            }
            if t + 1 < t_len {
                total += walk(lp, t + 1, u, t_len, y, acc * lp(t, u, 0).exp());
            }
            if u + 1 < u1 {
                total += walk(lp, t, u + 1, t_len, y, acc * lp(t, u, 1 + y[u]).exp());
            }
            total
        }
        let lp = |t: usize, u: usize, j: usize| logp[(t * u1 + u) * k1 + j];
        -walk(&lp, 0, 0, t_len, y, 1.0).ln()
    }

    /// Sum over every frame labelling that collapses to `y`.
    fn ctc_brute(logp: &[f64], t_len: usize, k1: usize, y: &[usize]) -> f64 {
        let mut total = 0.0;
        let mut path = vec![0usize; t_len];
        loop {
            let mut collapsed = Vec::new();
            let mut prev = 0;
            for &p in &path {
                if p != 0 && p != prev {
                    collapsed.push(p - 1);
                }
                prev = p;
            }
            if collapsed == y {
                total += path.iter().enumerate().map(|(t, &p)| logp[t * k1 + p]).sum::<f64>().exp();
            }
            let mut i = 0;
            while i < t_len {
                path[i] += 1;
                if path[i] < k1 {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
            if i == t_len {
                break;
            }
        }
        -total.ln()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn transducer_blank_only_and_single_path() {
        let t_len = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lp = random_logp(&mut rng, t_len, 3);
        let (v, _) = transducer_loss_raw(&lp, t_len, 3, &[]);
        let expected: f64 = -(0..t_len).map(|t| lp[t * 3]).sum::<f64>();
        assert!((v - expected).abs() < 1e-12);

        // T′=1, U=1: p_y(0,0)=0.4, p_blank(0,1)=0.5
        let probs = Tensor::new(vec![1, 2, 3], vec![0.3, 0.4, 0.3, 0.5, 0.25, 0.25]).unwrap();
        let lat = PosteriorLattice::from_probs(Mode::Hat, &probs).unwrap();
        let l = transducer_loss(&lat, &[0]).unwrap();
        assert!((l.value - 1.609_437_912_434_1).abs() < 1e-9);
        assert!((l.value + 0.2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_examples() {
        let p = [0.6, 0.4, 0.3, 0.7];
        let probs = Tensor::matrix(2, 2, p.to_vec()).unwrap();
        let lat = PosteriorLattice::from_probs(Mode::Ctc, &probs).unwrap();
        // paths aφ, φa, aa
        let expected = -(p[1] * p[2] + p[0] * p[3] + p[1] * p[3]).ln();
        assert!((ctc_loss(&lat, &[0]).unwrap().value - expected).abs() < 1e-12);
        assert!((ctc_loss(&lat, &[]).unwrap().value + (p[0] * p[2]).ln()).abs() < 1e-12);

        let probs = Tensor::matrix(2, 3, vec![0.2, 0.5, 0.3, 0.2, 0.5, 0.3]).unwrap();
        let lat = PosteriorLattice::from_probs(Mode::Ctc, &probs).unwrap();
        let l = ctc_loss(&lat, &[0, 0]).unwrap();
        assert_eq!(l.value, f64::INFINITY);
        assert!(l.grad.data().iter().all(|&g| g == 0.0));
        assert!(!ctc_loss(&lat, &[0, 1, 0]).unwrap().is_feasible());
    }

    #[test]
    fn cross_entropy_examples() {
        let k = 4;
        let uniform = Tensor::filled(&[3, k], 1.0 / k as f64);
        let lat = PosteriorLattice::from_probs(Mode::Aed, &uniform).unwrap();
        let l = cross_entropy_loss(&lat, &[1, 2, 3]).unwrap();
        assert!((l.value - 3.0 * (k as f64).ln()).abs() < 1e-12);

        let mut onehot = Tensor::zeros(&[2, 3]);
        onehot.set(&[0, 2], 1.0);
        onehot.set(&[1, 0], 1.0);
        let lat = PosteriorLattice::from_probs(Mode::Lm, &onehot).unwrap();
        assert_eq!(cross_entropy_loss(&lat, &[2, 0]).unwrap().value, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lp = random_logp(&mut rng, 3, 5);
        let lat = PosteriorLattice::from_log_probs(Mode::Aed, Tensor::matrix(3, 5, lp.clone()).unwrap()).unwrap();
        let direct = -(lp[4] + lp[5] + lp[10 + 2]);
        assert!((cross_entropy_loss(&lat, &[4, 0, 2]).unwrap().value - direct).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_arithmetic() {
        let ones = LossComponents::from_values([1.0; 9]);
        assert!((combined_loss(&ones, 0.1) - 8.1).abs() < 1e-12);
        assert_eq!(combined_loss(&ones, 0.0), 8.0);
        let mut bad = ones;
        bad.aed_str = f64::INFINITY;
        assert_eq!(bad.first_non_finite(), Some("L_aed_str"));
        assert_eq!(combined_loss(&bad, 0.1), f64::INFINITY);
    }

    #[test]
    fn tiny_probabilities_stay_finite() {
        let probs = Tensor::new(vec![2, 2, 2], vec![1e-300, 1.0 - 1e-300, 0.5, 0.5, 0.5, 0.5, 1e-300, 1.0 - 1e-300]).unwrap();
        let lat = PosteriorLattice::from_probs(Mode::Hat, &probs).unwrap();
        let l = transducer_loss(&lat, &[0]).unwrap();
        assert!(l.value.is_finite() && l.grad.all_finite());
    }

    fn fd_check(f: impl Fn(&[f64]) -> (f64, Vec<f64>), lp: &[f64]) {
        let (_, g) = f(lp);
        for i in 0..lp.len() {
            let mut a = lp.to_vec();
            let mut b = lp.to_vec();
            a[i] += 1e-5;
            b[i] -= 1e-5;
            let num = (f(&a).0 - f(&b).0) / 2e-5;
            assert!((num - g[i]).abs() / g[i].abs().max(1.0) < 1e-6, "entry {i}: {num} vs {}", g[i]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn dp_losses_match_enumeration_and_differences(
            seed in any::<u64>(), t_len in 1usize..=4, u in 0usize..=3, k in 1usize..=4,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<usize> = (0..u).map(|_| rng.random_range(0..k)).collect();
            let k1 = k + 1;

            let lp = random_logp(&mut rng, t_len * (u + 1), k1);
            let (v, _) = transducer_loss_raw(&lp, t_len, k1, &y);
            prop_assert!(rel(v, transducer_brute(&lp, t_len, k1, &y)) < 1e-9);
            fd_check(|x| transducer_loss_raw(x, t_len, k1, &y), &lp);

            let lp = random_logp(&mut rng, t_len, k1);
            let (v, _) = ctc_loss_raw(&lp, t_len, k1, &y);
            let b = ctc_brute(&lp, t_len, k1, &y);
            if b.is_finite() {
                prop_assert!(rel(v, b) < 1e-9);
                fd_check(|x| ctc_loss_raw(x, t_len, k1, &y), &lp);
            } else {
                prop_assert_eq!(v, f64::INFINITY);
            }
        }

        #[test]
        fn gradient_step_descends(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (t_len, k1, y) = (3, 4, vec![2usize, 0]);
            let logits: Vec<f64> = (0..t_len * 3 * k1).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = |z: &[f64], w: usize| -> Vec<f64> {
                z.chunks(w).flat_map(|c| log_softmax(c).unwrap()).collect()
            };
            // chain rule through row-wise log-softmax
            let step = |z: &[f64], f: &dyn Fn(&[f64]) -> (f64, Vec<f64>), w: usize| -> (f64, f64) {
                let lp = norm(z, w);
                let (v, g) = f(&lp);
                let mut dz = vec![0.0; z.len()];
                for (r, (gr, lr)) in g.chunks(w).zip(lp.chunks(w)).enumerate() {
                    let s: f64 = gr.iter().sum();
                    for j in 0..w {
                        dz[r * w + j] = gr[j] - lr[j].exp() * s;
                    }
                }
                let z2: Vec<f64> = z.iter().zip(&dz).map(|(a, d)| a - 1e-3 * d).collect();
                (v, f(&norm(&z2, w)).0)
            };
            let (before, after) = step(&logits, &|x| transducer_loss_raw(x, t_len, k1, &y), k1);
            prop_assert!(after < before);
            let (before, after) = step(&logits[..t_len * k1], &|x| ctc_loss_raw(x, t_len, k1, &y), k1);
            prop_assert!(after < before);
            let (before, after) = step(&logits[..3 * k1], &|x| cross_entropy_raw(x, k1, &[1, 3, 0]), k1);
            prop_assert!(after < before);
        }
    }
}
