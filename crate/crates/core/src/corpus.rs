//! Synthetic token-recognition corpus and token error rate.
//!
//! Every non-EOS token owns a random template vector; an utterance repeats
//! each token's template for a random duration and adds Gaussian noise.
//! Transcripts follow a sparse first-order Markov chain (each token has a
//! fixed set of `successors` possible followers, never itself), which gives
//! the label predictor and the language models structure to learn.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    /// Vocabulary size including EOS.
    pub vocab: usize,
    pub feat_dim: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise: f64,
    pub successors: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab: 6,
            feat_dim: 8,
            min_tokens: 2,
            max_tokens: 6,
            min_duration: 4,
            max_duration: 7,
            noise: 0.3,
            successors: 2,
            n_train: 500,
            n_dev: 50,
            n_test: 50,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab < 3 {
            return fail(format!("vocab must be at least 3, got {}", self.vocab));
        }
        if self.feat_dim == 0 {
            return fail("feat_dim must be positive".into());
        }
        if self.min_tokens == 0 {
            return fail("min_tokens must be positive".into());
        }
        if self.min_tokens > self.max_tokens {
            return fail(format!("min_tokens {} exceeds max_tokens {}", self.min_tokens, self.max_tokens));
        }
        if self.min_duration == 0 {
            return fail("min_duration must be positive".into());
        }
        if self.min_duration > self.max_duration {
            return fail(format!("min_duration {} exceeds max_duration {}", self.min_duration, self.max_duration));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return fail(format!("noise must be a finite non-negative value, got {}", self.noise));
        }
        if self.successors == 0 || self.successors > self.vocab - 2 {
            return fail(format!("successors must lie in 1..={}, got {}", self.vocab - 2, self.successors));
        }
        Ok(())
    }

    /// Number of real (non-EOS) tokens.
    pub fn labels(&self) -> usize {
        self.vocab - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T×F` feature frames.
    pub feats: Tensor,
    /// EOS-free reference.
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    /// `(K−1)×F`, one row per real token.
    pub templates: Tensor,
    /// Allowed followers of each real token.
    pub transitions: Vec<Vec<usize>>,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[Utterance]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over the combined words
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frames for `tokens` held for `durations` frames each, plus noise.
pub fn render<R: Rng>(templates: &Tensor, tokens: &[usize], durations: &[usize], noise: f64, rng: &mut R) -> Result<Tensor> {
    if tokens.len() != durations.len() {
        return Err(Error::Shape("one duration per token required".into()));
    }
    let f = templates.cols();
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let total: usize = durations.iter().sum();
    let mut data = Vec::with_capacity(total * f);
    for (&tok, &d) in tokens.iter().zip(durations) {
        if tok >= templates.rows() {
            return Err(Error::InvalidInput(format!("token {tok} has no template")));
        }
        for _ in 0..d {
            data.extend(templates.row(tok).iter().map(|&v| if noise > 0.0 { v + normal.sample(rng) } else { v }));
        }
    }
    Tensor::matrix(total, f, data)
}

pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let labels = cfg.labels();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0, 0));
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let templates = Tensor::matrix(labels, cfg.feat_dim, (0..labels * cfg.feat_dim).map(|_| std.sample(&mut rng)).collect())?;
    let transitions: Vec<Vec<usize>> = (0..labels)
        .map(|a| {
            let mut next: Vec<usize> = sample(&mut rng, labels - 1, cfg.successors)
                .into_iter()
                .map(|i| if i >= a { i + 1 } else { i })
                .collect();
            next.sort_unstable();
            next
        })
        .collect();
    let make = |split: usize, n: usize| -> Result<Vec<Utterance>> {
        (0..n)
            .map(|i| {
                let mut r = ChaCha8Rng::seed_from_u64(mix(cfg.seed, split as u64 + 1, i as u64));
                let u = r.random_range(cfg.min_tokens..=cfg.max_tokens);
                let mut tokens = vec![r.random_range(0..labels)];
                while tokens.len() < u {
                    let prev = *tokens.last().expect("non-empty");
                    let succ = &transitions[prev];
                    tokens.push(succ[r.random_range(0..succ.len())]);
                }
                let durations: Vec<usize> = (0..u).map(|_| r.random_range(cfg.min_duration..=cfg.max_duration)).collect();
                let feats = render(&templates, &tokens, &durations, cfg.noise, &mut r)?;
                Ok(Utterance { id: format!("{}_{i:04}", SPLITS[split]), feats, tokens })
            })
            .collect()
    };
    Ok(Corpus {
        train: make(0, cfg.n_train)?,
        dev: make(1, cfg.n_dev)?,
        test: make(2, cfg.n_test)?,
        templates,
        transitions,
    })
}

/// Levenshtein distance with unit substitution, insertion and deletion costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

pub fn token_error_rate(hyp: &[usize], reference: &[usize]) -> f64 {
    edit_distance(hyp, reference) as f64 / reference.len().max(1) as f64
}

/// Corpus-level rate: total edits over total reference length.
pub fn corpus_ter<'a>(pairs: impl IntoIterator<Item = (&'a [usize], &'a [usize])>) -> f64 {
    let (mut edits, mut len) = (0, 0);
    for (h, r) in pairs {
        edits += edit_distance(h, r);
        len += r.len().max(1);
    }
    edits as f64 / len.max(1) as f64
}

pub fn write_split(dir: &Path, utts: &[Utterance]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut refs = BufWriter::new(fs::File::create(dir.join("refs.tsv"))?);
    for u in utts {
        let bytes: Vec<u8> = u.feats.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        fs::write(dir.join(format!("feats_{}.f32", u.id)), bytes)?;
        let ids: Vec<String> = u.tokens.iter().map(ToString::to_string).collect();
        writeln!(refs, "{}\t{}", u.id, ids.join(" "))?;
    }
    refs.flush()?;
    Ok(())
}

pub fn write_corpus(dir: &Path, c: &Corpus) -> Result<()> {
    for name in SPLITS {
        write_split(&dir.join(name), c.split(name).expect("known split"))?;
    }
    Ok(())
}

/// Reads a split written by [`write_split`]; features have `feat_dim` columns.
pub fn read_split(dir: &Path, feat_dim: usize) -> Result<Vec<Utterance>> {
    let refs = fs::File::open(dir.join("refs.tsv"))
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", dir.join("refs.tsv").display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(refs).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, ids) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("refs.tsv line {}: missing tab", n + 1)))?;
        let tokens = ids
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::Format(format!("refs.tsv line {}: {e}", n + 1))))
            .collect::<Result<Vec<_>>>()?;
        let bytes = fs::read(dir.join(format!("feats_{id}.f32")))?;
        if bytes.len() % (4 * feat_dim) != 0 {
            return Err(Error::Format(format!("feats_{id}.f32 is not a whole number of {feat_dim}-value rows")));
        }
        let data: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let feats = Tensor::matrix(data.len() / feat_dim, feat_dim, data)?;
        out.push(Utterance { id: id.to_string(), feats, tokens });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn noiseless_render_repeats_template() {
        let tpl = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = render(&tpl, &[1], &[3], 0.0, &mut rng).unwrap();
        assert_eq!(x.dims(), &[3, 3]);
        for t in 0..3 {
            assert_eq!(x.row(t), tpl.row(1));
        }
    }

    #[test]
    fn generation_is_deterministic_and_structured() {
        let cfg = CorpusConfig { n_train: 200, n_dev: 5, n_test: 5, ..CorpusConfig::default() };
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        let other = generate(&CorpusConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(a.train[0].feats, other.train[0].feats);
        for u in &a.train {
            assert!((2..=6).contains(&u.tokens.len()));
            assert!(u.tokens.iter().all(|&t| t < 5));
            for w in u.tokens.windows(2) {
                assert!(a.transitions[w[0]].contains(&w[1]));
            }
            // CTC needs one frame per token after subsampling by 2; no repeats occur
            let frames = u.feats.rows().div_ceil(2);
            assert!(frames >= u.tokens.len());
            assert!(u.tokens.windows(2).all(|w| w[0] != w[1]));
        }
    }

    #[test]
    fn config_errors_name_the_field() {
        let bad = CorpusConfig { min_tokens: 7, ..CorpusConfig::default() };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("min_tokens"));
        assert!(CorpusConfig { vocab: 2, ..CorpusConfig::default() }.validate().is_err());
        assert!(CorpusConfig { noise: -1.0, ..CorpusConfig::default() }.validate().is_err());
        assert!(CorpusConfig { min_duration: 0, ..CorpusConfig::default() }.validate().is_err());
    }

    #[test]
    fn ter_examples() {
        assert_eq!(token_error_rate(&[1, 2, 3], &[1, 2, 3]), 0.0);
        assert_eq!(token_error_rate(&[], &[1, 2, 3, 4]), 1.0);
        assert!((token_error_rate(&[0, 1, 2], &[0, 9, 2]) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(token_error_rate(&[4], &[]), 1.0);
    }

    #[test]
    fn disk_round_trip() {
        let cfg = CorpusConfig { n_train: 3, n_dev: 2, n_test: 1, ..CorpusConfig::default() };
        let c = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &c).unwrap();
        let back = read_split(&dir.path().join("train"), cfg.feat_dim).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in c.train.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.tokens, b.tokens);
            for (x, y) in a.feats.data().iter().zip(b.feats.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    proptest! {
        #[test]
        fn edit_distance_properties(a in proptest::collection::vec(0usize..4, 0..8), b in proptest::collection::vec(0usize..4, 0..8), extra in 0usize..4) {
            prop_assert_eq!(edit_distance(&a, &a), 0);
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
            // injecting tokens absent from the reference never lowers the distance
            let mut longer = a.clone();
            longer.extend(std::iter::repeat_n(9, extra));
            prop_assert!(edit_distance(&longer, &b) >= edit_distance(&a, &b));
        }
    }
}
