//! Emission frames from transducer forward-backward statistics and the
//! cross-attention masks derived from them for streaming AED training.
//!
//! Mask rows follow the prediction they serve: row `u` (the prefix
//! `y₁…y_u`) predicts `y_{u+1}`, so it may attend up to the end of the chunk
//! in which `y_{u+1}` is emitted. That is the context a frame-synchronous
//! decoder has when it scores `y_{u+1}` at its emission frame. The final row
//! predicts EOS and attends every frame.

use crate::encoder::ChunkConfig;
use crate::error::{Error, Result};
use crate::lattice::{Mode, PosteriorLattice};
use crate::loss::TransducerFb;
use crate::tensor::Tensor;

/// Node occupancy posteriors `γ(t, u)` of a transducer lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct Occupancy {
    pub gamma: Tensor,
}

fn transducer_fb(lat: &PosteriorLattice, y: &[usize]) -> Result<TransducerFb> {
    if !matches!(lat.mode(), Mode::Hat | Mode::Twa) {
        return Err(Error::InvalidInput(format!("alignment from a {} lattice", lat.mode())));
    }
    let d = lat.dims();
    if d[1] != y.len() + 1 {
        return Err(Error::Shape(format!("lattice has {} label rows for {} tokens", d[1], y.len())));
    }
    if let Some(v) = y.iter().find(|&&v| v + 1 >= d[2]) {
        return Err(Error::InvalidInput(format!("token {v} outside the lattice vocabulary")));
    }
    let fb = TransducerFb::compute(lat.log_probs().data(), d[0], d[2], y);
    if !fb.log_likelihood().is_finite() {
        return Err(Error::InvalidInput("target is infeasible under the lattice".into()));
    }
    Ok(fb)
}

pub fn occupancy(lat: &PosteriorLattice, y: &[usize]) -> Result<Occupancy> {
    let fb = transducer_fb(lat, y)?;
    let (t_len, u1) = (fb.t_len(), fb.u1());
    let ll = fb.log_likelihood();
    let mut g = vec![0.0; t_len * u1];
    for t in 0..t_len {
        for u in 0..u1 {
            g[t * u1 + u] = (fb.alpha(t, u) + fb.beta(t, u) - ll).exp();
        }
    }
    Ok(Occupancy { gamma: Tensor::matrix(t_len, u1, g)? })
}

fn emission_from_fb(fb: &TransducerFb, logp: &[f64], k1: usize, y: &[usize]) -> Vec<f64> {
    let (t_len, u1) = (fb.t_len(), fb.u1());
    let ll = fb.log_likelihood();
    let mut out = vec![0.0; y.len() * t_len];
    for (u, &tok) in y.iter().enumerate() {
        for t in 0..t_len {
            let lp = logp[(t * u1 + u) * k1 + 1 + tok];
            out[u * t_len + t] = (fb.alpha(t, u) + lp + fb.beta(t, u + 1) - ll).exp();
        }
    }
    out
}

/// `P(y_u emitted at frame t | X)`, one row of `T′` values per token; each
/// row sums to 1.
pub fn emission_posteriors(lat: &PosteriorLattice, y: &[usize]) -> Result<Vec<Vec<f64>>> {
    let fb = transducer_fb(lat, y)?;
    let post = emission_from_fb(&fb, lat.log_probs().data(), lat.width(), y);
    Ok(post.chunks(fb.t_len()).map(<[f64]>::to_vec).collect())
}

fn frames_from_posteriors(post: &[f64], t_len: usize, n: usize) -> Vec<usize> {
    let mut frames = Vec::with_capacity(n);
    let mut floor = 0;
    for u in 0..n {
        let row = &post[u * t_len..(u + 1) * t_len];
        let mut best = 0;
        for t in 1..t_len {
            // near-equal values count as a tie and keep the earlier frame
            if row[t] > row[best] + 1e-12 {
                best = t;
            }
        }
        floor = best.max(floor);
        frames.push(floor);
    }
    frames
}

/// Most probable (0-based) emission frame of every token, made non-decreasing.
pub fn emission_frames(lat: &PosteriorLattice, y: &[usize]) -> Result<Vec<usize>> {
    let fb = transducer_fb(lat, y)?;
    let post = emission_from_fb(&fb, lat.log_probs().data(), lat.width(), y);
    Ok(frames_from_posteriors(&post, fb.t_len(), y.len()))
}

/// Same as [`emission_frames`] on a flat `[T′·(U+1)·(K+1)]` log-probability
/// array; `None` when the target is infeasible.
pub fn emission_frames_raw(logp: &[f64], t_len: usize, k1: usize, y: &[usize]) -> Option<Vec<usize>> {
    let fb = TransducerFb::compute(logp, t_len, k1, y);
    if !fb.log_likelihood().is_finite() {
        return None;
    }
    let post = emission_from_fb(&fb, logp, k1, y);
    Some(frames_from_posteriors(&post, t_len, y.len()))
}

/// Row-major `(U+1)×T′` streaming cross-attention mask; `frames[u]` is the
/// 0-based emission frame of `y_{u+1}`.
pub fn aed_stream_mask(frames: &[usize], cfg: &ChunkConfig, t_len: usize) -> Vec<bool> {
    let u1 = frames.len() + 1;
    let mut m = vec![false; u1 * t_len];
    for r in 0..u1 {
        let end = match frames.get(r) {
            Some(&f) => cfg.chunk_end(f.min(t_len - 1), t_len),
            None => t_len,
        };
        m[r * t_len..r * t_len + end].fill(true);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::log_softmax;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lattice(seed: u64, t_len: usize, u: usize, k1: usize) -> PosteriorLattice {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        for _ in 0..t_len * (u + 1) {
            let z: Vec<f64> = (0..k1).map(|_| rng.random_range(-2.0..2.0)).collect();
            data.extend(log_softmax(&z).unwrap());
        }
        PosteriorLattice::from_log_probs(Mode::Hat, Tensor::new(vec![t_len, u + 1, k1], data).unwrap()).unwrap()
    }

    /// Enumerates alignments as the frames at which each token is emitted.
    fn enumerate(lat: &PosteriorLattice, y: &[usize]) -> Vec<(Vec<usize>, f64)> {
        let d = lat.dims().to_vec();
        let (t_len, u1) = (d[0], d[1]);
        let mut out = Vec::new();
        fn rec(lat: &PosteriorLattice, y: &[usize], t: usize, u: usize, t_len: usize, u1: usize, frames: &mut Vec<usize>, p: f64, out: &mut Vec<(Vec<usize>, f64)>) {
            let cell = lat.slice(&[t, u]);
            if t == t_len - 1 && u == u1 - 1 {
                out.push((frames.clone(), p * cell[0].exp()));
                return;
            }
            if t + 1 < t_len {
                rec(lat, y, t + 1, u, t_len, u1, frames, p * cell[0].exp(), out);
            }
            if u + 1 < u1 {
                frames.push(t);
                rec(lat, y, t, u + 1, t_len, u1, frames, p * cell[1 + y[u]].exp(), out);
                frames.pop();
            }
        }
        rec(lat, y, 0, 0, t_len, u1, &mut Vec::new(), 1.0, &mut out);
        out
    }

    #[test]
    fn single_node_occupancy() {
        let lat = random_lattice(0, 1, 0, 3);
        assert!((occupancy(&lat, &[]).unwrap().gamma.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_two_path_lattice() {
        let lat = PosteriorLattice::from_probs(Mode::Hat, &Tensor::filled(&[2, 2, 3], 1.0 / 3.0)).unwrap();
        let g = occupancy(&lat, &[1]).unwrap().gamma;
        // two equally likely paths: label at frame 0 or at frame 1
        for (v, e) in g.data().iter().zip([1.0, 0.5, 0.5, 1.0]) {
            assert!((v - e).abs() < 1e-12);
        }
        assert_eq!(emission_frames(&lat, &[1]).unwrap(), vec![0]);
    }

    #[test]
    fn concentrated_posterior_recovers_alignment() {
        // T′=3, U=2: emit y1 at frame 1 and y2 at frame 2
        let (t_len, u1, k1) = (3, 3, 3);
        let y = [0, 1];
        let mut p = vec![1e-6; t_len * u1 * k1];
        let mut set = |t: usize, u: usize, j: usize| p[(t * u1 + u) * k1 + j] = 1.0;
        set(0, 0, 0);
        set(1, 0, 1);
        set(1, 1, 0);
        set(2, 1, 2);
        set(2, 2, 0);
        let lat = PosteriorLattice::from_probs(Mode::Hat, &Tensor::new(vec![t_len, u1, k1], p).unwrap()).unwrap();
        assert_eq!(emission_frames(&lat, &y).unwrap(), vec![1, 2]);
    }

    #[test]
    fn infeasible_target_is_rejected() {
        let mut p = Tensor::filled(&[1, 2, 3], 0.5);
        p.set(&[0, 0, 1], 0.0);
        p.set(&[0, 0, 2], 0.5);
        let lat = PosteriorLattice::from_probs(Mode::Hat, &p).unwrap();
        assert!(occupancy(&lat, &[0]).is_err());
    }

    #[test]
    fn mask_examples() {
        let c = ChunkConfig::new(2, 0).unwrap();
        let m = aed_stream_mask(&[0], &c, 4);
        assert_eq!(m, [true, true, false, false, true, true, true, true]);
        let m = aed_stream_mask(&[1, 3], &c, 4);
        assert_eq!(&m[4..8], &[true; 4]);
        let wide = ChunkConfig::new(4, 0).unwrap();
        assert!(aed_stream_mask(&[0, 1, 1], &wide, 4).iter().all(|&b| b));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn emission_posteriors_match_enumeration(seed in any::<u64>(), t_len in 1usize..=4, u in 0usize..=3) {
            let lat = random_lattice(seed, t_len, u, 4);
            let y: Vec<usize> = (0..u).map(|i| (seed as usize + i) % 3).collect();
            let paths = enumerate(&lat, &y);
            let total: f64 = paths.iter().map(|p| p.1).sum();
            let post = emission_posteriors(&lat, &y).unwrap();
            for (i, _) in y.iter().enumerate() {
                let row = &post[i];
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for t in 0..t_len {
                    let e: f64 = paths.iter().filter(|p| p.0[i] == t).map(|p| p.1).sum::<f64>() / total;
                    prop_assert!((row[t] - e).abs() < 1e-9);
                }
            }
            let g = occupancy(&lat, &y).unwrap().gamma;
            prop_assert!(g.data().iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)));
        }

        #[test]
        fn masks_are_nested(frames in proptest::collection::vec(0usize..12, 0..6), lc in 1usize..5, h in 0usize..3) {
            let mut frames = frames;
            frames.sort_unstable();
            let c = ChunkConfig::new(lc, h).unwrap();
            let m = aed_stream_mask(&frames, &c, 12);
            for r in 0..frames.len() {
                for t in 0..12 {
                    prop_assert!(!m[r * 12 + t] || m[(r + 1) * 12 + t]);
                }
                prop_assert!(m[r * 12]);
            }
        }
    }
}
