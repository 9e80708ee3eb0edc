//! Synthetic utterances, character tokenization, padded batches with masks,
//! token-side time masking, and a line-oriented dump format.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::blocks::FrameMask;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Parameters of the synthetic recognition task.
///
/// Each token owns a fixed random prototype vector. An utterance emits, for
/// every token, `r` steps of that prototype plus Gaussian noise, where one
/// step spans `frames_per_step` raw frames. With the default of four frames
/// per step, `r` counts frames after the frontend's 1/4 subsampling, so CTC
/// always has at least `r_min` frames per token to work with.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub vocab: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_steps_per_token: usize,
    pub max_steps_per_token: usize,
    pub frames_per_step: usize,
    pub d_feat: usize,
    pub noise: f64,
    pub prototype_seed: u64,
    /// Adjacent equal tokens merge into one longer segment of identical
    /// frames, which makes the target ambiguous; off by default.
    pub allow_repeats: bool,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab: 8,
            min_tokens: 3,
            max_tokens: 10,
            min_steps_per_token: 2,
            max_steps_per_token: 4,
            frames_per_step: 4,
            d_feat: 16,
            noise: 0.1,
            prototype_seed: 1,
            allow_repeats: false,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.vocab > ALPHABET.len() {
            return Err(Error::config("task.vocab", format!("must lie in 1..={}", ALPHABET.len())));
        }
        if !self.allow_repeats && self.vocab < 2 && self.max_tokens > 1 {
            return Err(Error::config("task.vocab", "a single token cannot avoid repeats"));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::config("task.min_tokens", "need 1 <= min_tokens <= max_tokens"));
        }
        if self.min_steps_per_token == 0 || self.min_steps_per_token > self.max_steps_per_token {
            return Err(Error::config(
                "task.min_frames_per_token",
                "need 1 <= min_frames_per_token <= max_frames_per_token",
            ));
        }
        if self.frames_per_step == 0 {
            return Err(Error::config("task.frames_per_step", "must be positive"));
        }
        if self.d_feat == 0 {
            return Err(Error::config("task.d_feat", "must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("task.noise", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance<T> {
    pub id: String,
    /// `[T, d_feat]`.
    pub features: Tensor<T>,
    /// Token ids, 1-based (0 is the blank).
    pub tokens: Vec<usize>,
}

impl<T: Scalar> Utterance<T> {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    pub fn cast<U: Scalar>(&self) -> Utterance<U> {
        Utterance {
            id: self.id.clone(),
            features: self.features.cast(),
            tokens: self.tokens.clone(),
        }
    }
}

/// Holds the token prototypes of one task.
#[derive(Debug, Clone)]
pub struct Generator {
    spec: SyntheticTaskSpec,
    prototypes: Vec<Vec<f64>>,
}

impl Generator {
    pub fn new(spec: SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.prototype_seed);
        let prototypes = (0..spec.vocab)
            .map(|_| (0..spec.d_feat).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Ok(Self { spec, prototypes })
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }

    /// Prototype of token `id` (1-based).
    pub fn prototype(&self, id: usize) -> &[f64] {
        &self.prototypes[id - 1]
    }

    pub fn generate<T: Scalar, R: Rng + ?Sized>(&self, id: &str, rng: &mut R) -> Utterance<T> {
        let s = &self.spec;
        let n = rng.random_range(s.min_tokens..=s.max_tokens);
        let mut tokens = Vec::with_capacity(n);
        while tokens.len() < n {
            let t = rng.random_range(1..=s.vocab);
            if s.allow_repeats || tokens.last() != Some(&t) {
                tokens.push(t);
            }
        }
        let mut data = Vec::new();
        for &t in &tokens {
            let steps = rng.random_range(s.min_steps_per_token..=s.max_steps_per_token);
            for _ in 0..steps * s.frames_per_step {
                for &p in &self.prototypes[t - 1] {
                    let eps: f64 = if s.noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                    data.push(T::lit(p + s.noise * eps));
                }
            }
        }
        let frames = data.len() / s.d_feat;
        Utterance {
            id: id.to_string(),
            features: Tensor::new(&[frames, s.d_feat], data).expect("feature shape"),
            tokens,
        }
    }

    /// `count` utterances from one seed, with ids `{prefix}-{index}`.
    pub fn dataset<T: Scalar>(&self, prefix: &str, seed: u64, count: usize) -> Vec<Utterance<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| self.generate(&format!("{prefix}-{i:06}"), &mut rng))
            .collect()
    }
}

const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz";

/// Character vocabulary: the first `size` lowercase letters, ids from 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<char>,
}

impl Alphabet {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || size > ALPHABET.len() {
            return Err(Error::config("task.vocab", format!("must lie in 1..={}", ALPHABET.len())));
        }
        Ok(Self {
            chars: ALPHABET.chars().take(size).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        if text.is_empty() {
            return Err(Error::contract("token sequences must be nonempty"));
        }
        text.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|&a| a == c)
                    .map(|i| i + 1)
                    .ok_or(Error::UnknownChar(c))
            })
            .collect()
    }

    pub fn detokenize(&self, tokens: &[usize]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| {
                t.checked_sub(1)
                    .and_then(|i| self.chars.get(i).copied())
                    .ok_or_else(|| Error::Index(format!("token id {t} outside the alphabet")))
            })
            .collect()
    }
}

/// Utterances padded to common lengths.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub ids: Vec<String>,
    /// `[B, T_max, d_feat]`, zero padded.
    pub features: Tensor<T>,
    /// `B` rows of `N_max` ids, padded with 0.
    pub tokens: Vec<Vec<usize>>,
    pub frame_masks: Vec<FrameMask>,
    pub token_masks: Vec<FrameMask>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_utterances(utts: &[&Utterance<T>]) -> Result<Self> {
        let first = utts
            .first()
            .ok_or_else(|| Error::contract("cannot batch zero utterances"))?;
        let d = first.features.cols();
        let t_max = utts.iter().map(|u| u.frames()).max().unwrap_or(0);
        let n_max = utts.iter().map(|u| u.tokens.len()).max().unwrap_or(0);
        let mut data = Vec::with_capacity(utts.len() * t_max * d);
        let mut tokens = Vec::with_capacity(utts.len());
        let mut frame_masks = Vec::with_capacity(utts.len());
        let mut token_masks = Vec::with_capacity(utts.len());
        for u in utts {
            if u.features.cols() != d || u.features.rank() != 2 {
                return Err(Error::shape(format!(
                    "utterance {} has features {:?}, expected [*, {d}]",
                    u.id,
                    u.features.shape()
                )));
            }
            data.extend_from_slice(u.features.data());
            data.resize(data.len() + (t_max - u.frames()) * d, T::zero());
            let mut t = u.tokens.clone();
            t.resize(n_max, 0);
            tokens.push(t);
            frame_masks.push(FrameMask::prefix(t_max, u.frames()));
            token_masks.push(FrameMask::prefix(n_max, u.tokens.len()));
        }
        Ok(Self {
            ids: utts.iter().map(|u| u.id.clone()).collect(),
            features: Tensor::new(&[utts.len(), t_max, d], data)?,
            tokens,
            frame_masks,
            token_masks,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Padded `[T_max, d_feat]` features of entry `i`.
    pub fn features_of(&self, i: usize) -> Tensor<T> {
        let s = self.features.shape();
        let (t, d) = (s[1], s[2]);
        Tensor::new(&[t, d], self.features.data()[i * t * d..(i + 1) * t * d].to_vec())
            .expect("batch row shape")
    }

    /// Unpadded token ids of entry `i`.
    pub fn tokens_of(&self, i: usize) -> &[usize] {
        &self.tokens[i][..self.token_masks[i].valid_count()]
    }
}

/// Shuffles with `rng` and cuts into batches of at most `batch_size`.
pub fn make_batches<T: Scalar, R: Rng + ?Sized>(
    utterances: &[Utterance<T>],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Batch<T>>> {
    if utterances.is_empty() {
        return Err(Error::contract("make_batches on an empty set"));
    }
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..utterances.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<_> = chunk.iter().map(|&i| &utterances[i]).collect();
            Batch::from_utterances(&refs)
        })
        .collect()
}

/// Number of token positions masked for a sequence of length `n`.
pub fn mask_count(n: usize, fraction: f64) -> usize {
    // Subtracting a hair before the ceiling keeps 0.1 * 10 at exactly 1.
    ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Positions (sorted) zeroed by token time masking.
pub fn token_mask_positions<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Vec<usize> {
    let k = mask_count(n, fraction).min(n);
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// Zeroes `⌈fraction·n_valid⌉` of the first `n_valid` rows of `emb`.
pub fn token_time_mask<'g, T: Scalar, R: Rng + ?Sized>(
    emb: Var<'g, T>,
    n_valid: usize,
    fraction: f64,
    rng: &mut R,
) -> Result<Var<'g, T>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::contract(format!("mask fraction {fraction} outside [0, 1]")));
    }
    let shape = emb.shape();
    if shape.len() != 2 || n_valid > shape[0] {
        return Err(Error::shape(format!("token mask over {shape:?} with {n_valid} valid rows")));
    }
    let positions = token_mask_positions(n_valid, fraction, rng);
    if positions.is_empty() {
        return Ok(emb);
    }
    let d = shape[1];
    let mut flags = vec![false; shape[0] * d];
    for p in positions {
        flags[p * d..(p + 1) * d].fill(true);
    }
    emb.masked_fill(&flags, T::zero())
}

/// Writes one record per line: id, token ids, base64 of little-endian f32
/// features, T, d_feat; tab separated.
pub fn dump<T: Scalar, W: Write>(utts: &[Utterance<T>], mut out: W) -> Result<()> {
    for u in utts {
        if u.id.contains(['\t', '\n']) {
            return Err(Error::contract(format!("utterance id {:?} contains a tab or newline", u.id)));
        }
        let mut bytes = Vec::with_capacity(u.features.len() * 4);
        for &v in u.features.data() {
            bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        let mut toks = String::new();
        for (i, t) in u.tokens.iter().enumerate() {
            if i > 0 {
                toks.push(' ');
            }
            write!(toks, "{t}").expect("string write");
        }
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            u.id,
            toks,
            B64.encode(&bytes),
            u.features.rows(),
            u.features.cols()
        )?;
    }
    Ok(())
}

pub fn load<T: Scalar, R: BufRead>(input: R) -> Result<Vec<Utterance<T>>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let rec = |msg: String| Error::Record { line: i + 1, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(rec(format!("expected 5 tab-separated fields, found {}", fields.len())));
        }
        let tokens = fields[1]
            .split(' ')
            .map(|t| t.parse::<usize>().map_err(|e| rec(format!("token {t:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if tokens.contains(&0) {
            return Err(rec("token id 0 is reserved for the blank".into()));
        }
        let t: usize = fields[3].parse().map_err(|e| rec(format!("T: {e}")))?;
        let d: usize = fields[4].parse().map_err(|e| rec(format!("d_feat: {e}")))?;
        let bytes = B64.decode(fields[2]).map_err(|e| rec(format!("base64: {e}")))?;
        if bytes.len() != t * d * 4 {
            return Err(rec(format!("payload has {} bytes, expected {}", bytes.len(), t * d * 4)));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        out.push(Utterance {
            id: fields[0].to_string(),
            features: Tensor::new(&[t, d], data)?,
            tokens,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn noiseless_fixed_rate_repeats_prototypes() {
        let spec = SyntheticTaskSpec {
            noise: 0.0,
            min_steps_per_token: 3,
            max_steps_per_token: 3,
            ..SyntheticTaskSpec::default()
        };
        let gen = Generator::new(spec).unwrap();
        let u: Utterance<f64> = gen.generate("u", &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(u.frames(), 12 * u.tokens.len());
        for (k, &t) in u.tokens.iter().enumerate() {
            for f in 0..12 {
                assert_eq!(u.features.row(12 * k + f), gen.prototype(t));
            }
        }
    }

    #[test]
    fn lengths_within_bounds_and_no_adjacent_repeats() {
        let gen = Generator::new(SyntheticTaskSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..200 {
            let u: Utterance<f64> = gen.generate(&i.to_string(), &mut rng);
            let n = u.tokens.len();
            assert!((3..=10).contains(&n));
            assert!(u.frames() >= 8 * n && u.frames() <= 16 * n);
            assert!(u.tokens.windows(2).all(|w| w[0] != w[1]));
            assert!(u.tokens.iter().all(|&t| (1..=8).contains(&t)));
        }
    }

    #[test]
    fn generation_is_seeded() {
        let gen = Generator::new(SyntheticTaskSpec::default()).unwrap();
        let a: Vec<Utterance<f64>> = gen.dataset("x", 9, 5);
        let b: Vec<Utterance<f64>> = gen.dataset("x", 9, 5);
        assert_eq!(a, b);
        let c: Vec<Utterance<f64>> = gen.dataset("x", 10, 5);
        assert_ne!(a, c);
    }

    #[test]
    fn spec_validation_names_fields() {
        let bad = SyntheticTaskSpec { min_tokens: 0, ..SyntheticTaskSpec::default() };
        match bad.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "task.min_tokens"),
            other => panic!("{other:?}"),
        }
        let noisy = SyntheticTaskSpec { noise: -1.0, ..SyntheticTaskSpec::default() };
        assert!(noisy.validate().is_err());
    }

    #[test]
    fn tokenizer_round_trip() {
        let a = Alphabet::new(2).unwrap();
        assert_eq!(a.tokenize("ab").unwrap(), vec![1, 2]);
        assert_eq!(a.detokenize(&[2, 1, 2]).unwrap(), "bab");
        assert!(matches!(a.tokenize(""), Err(Error::Contract(_))));
        match a.tokenize("abc") {
            Err(Error::UnknownChar(c)) => assert_eq!(c, 'c'),
            other => panic!("{other:?}"),
        }
        let full = Alphabet::new(8).unwrap();
        let text = "hgfedcbaabc";
        assert_eq!(full.detokenize(&full.tokenize(text).unwrap()).unwrap(), text);
        assert!(full.detokenize(&[0]).is_err());
    }

    #[test]
    fn mask_counts_follow_ceiling() {
        assert_eq!(mask_count(10, 0.1), 1);
        assert_eq!(mask_count(11, 0.1), 2);
        assert_eq!(mask_count(3, 0.1), 1);
        assert_eq!(mask_count(20, 0.1), 2);
        assert_eq!(mask_count(7, 0.0), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..40 {
            let p = token_mask_positions(n, 0.1, &mut rng);
            assert_eq!(p.len(), (n as f64 / 10.0).ceil() as usize);
            assert!(p.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn token_mask_zeroes_whole_rows() {
        let g = Graph::<f64>::new();
        let emb = g.constant(Tensor::full(&[12, 3], 2.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = token_time_mask(emb, 10, 0.1, &mut rng).unwrap().value();
        let zero_rows: Vec<usize> = (0..12).filter(|&r| out.row(r).iter().all(|&v| v == 0.0)).collect();
        assert_eq!(zero_rows.len(), 1);
        assert!(zero_rows[0] < 10);
        let same = token_time_mask(emb, 10, 0.0, &mut rng).unwrap();
        assert_eq!(same.id(), emb.id());
    }

    #[test]
    fn batches_cover_every_utterance_once() {
        let gen = Generator::new(SyntheticTaskSpec::default()).unwrap();
        let utts: Vec<Utterance<f64>> = gen.dataset("b", 1, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batches = make_batches(&utts, 5, &mut rng).unwrap();
        assert_eq!(batches.len(), 5);
        let mut seen: Vec<String> = batches.iter().flat_map(|b| b.ids.clone()).collect();
        seen.sort();
        let mut all: Vec<String> = utts.iter().map(|u| u.id.clone()).collect();
        all.sort();
        assert_eq!(seen, all);
        let again = make_batches(&utts, 5, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(again[0].ids, batches[0].ids);
        assert!(make_batches::<f64, _>(&[], 5, &mut rng).is_err());
    }

    #[test]
    fn batch_masks_match_lengths() {
        let gen = Generator::new(SyntheticTaskSpec::default()).unwrap();
        let utts: Vec<Utterance<f64>> = gen.dataset("m", 2, 4);
        let refs: Vec<_> = utts.iter().collect();
        let b = Batch::from_utterances(&refs).unwrap();
        let t_max = utts.iter().map(|u| u.frames()).max().unwrap();
        for (i, u) in utts.iter().enumerate() {
            assert_eq!(b.frame_masks[i].valid_count(), u.frames());
            assert_eq!(b.frame_masks[i].len(), t_max);
            assert_eq!(b.tokens_of(i), &u.tokens[..]);
            let f = b.features_of(i);
            assert_eq!(&f.data()[..u.features.len()], u.features.data());
            assert!(f.data()[u.features.len()..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dump_round_trip() {
        let gen = Generator::new(SyntheticTaskSpec::default()).unwrap();
        let utts: Vec<Utterance<f32>> = gen.dataset("d", 3, 3);
        let mut buf = Vec::new();
        dump(&utts, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let first: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
        assert_eq!(first[0], "d-000000");
        assert_eq!(first[4], "16");
        let back: Vec<Utterance<f32>> = load(&buf[..]).unwrap();
        assert_eq!(back, utts);
    }

    #[test]
    fn load_reports_line_numbers() {
        let text = "a\t1 2\tAAAA\t1\t1\nb\t1\t!!\t1\t1\n";
        match load::<f64, _>(text.as_bytes()) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        let ok = format!("a\t3\t{}\t1\t1\n", B64.encode(1.5f32.to_le_bytes()));
        let u = load::<f64, _>(ok.as_bytes()).unwrap();
        assert_eq!(u[0].features.data(), &[1.5]);
    }
}
