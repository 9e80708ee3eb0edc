//! Connectionist temporal classification.
//!
//! Label id 0 is the blank; tokens are `1..=|V|`. The sequence likelihood is
//! a log-space forward recursion over the blank-interleaved target, written
//! with differentiable ops so gradients come from the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

pub const BLANK: usize = 0;

/// Maps an alignment to its token sequence: merge runs, then drop blanks.
pub fn collapse(alignment: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &a in alignment {
        if Some(a) != prev && a != BLANK {
            out.push(a);
        }
        prev = Some(a);
    }
    out
}

/// The blank-interleaved target `<b> c1 <b> c2 ... cN <b>` and its skip transitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpandedTarget {
    states: Vec<usize>,
    skip: Vec<bool>,
}

impl ExpandedTarget {
    pub fn new(target: &[usize]) -> Self {
        let mut states = Vec::with_capacity(2 * target.len() + 1);
        states.push(BLANK);
        for &c in target {
            states.push(c);
            states.push(BLANK);
        }
        let skip = (0..states.len())
            .map(|s| s >= 2 && states[s] != BLANK && states[s] != states[s - 2])
            .collect();
        Self { states, skip }
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Whether state `s` may be entered directly from `s - 2`.
    pub fn can_skip(&self, s: usize) -> bool {
        self.skip[s]
    }
}

/// Fewest frames any alignment of `target` needs: one per token plus a
/// separating blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(target: &[usize], frames: usize) -> bool {
    min_frames(target) <= frames
}

fn check_inputs(shape: &[usize], target: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::shape(format!(
            "CTC log-probs must be [frames, |V|+1] with |V| >= 1, got {shape:?}"
        )));
    }
    if let Some(&bad) = target.iter().find(|&&c| c == BLANK || c >= shape[1]) {
        return Err(Error::Index(format!(
            "target token {bad} outside 1..{}",
            shape[1] - 1
        )));
    }
    Ok((shape[0], shape[1]))
}

/// `log p(target)` summed over every alignment that collapses to `target`.
///
/// `log_probs` is `[T', |V|+1]` with log-normalized rows. Returns `-inf`
/// when the target cannot fit in `T'` frames.
pub fn ctc_log_likelihood<'g, T: Scalar>(log_probs: Var<'g, T>, target: &[usize]) -> Result<Var<'g, T>> {
    let (frames, classes) = check_inputs(&log_probs.shape(), target)?;
    let graph = log_probs.graph();
    if frames == 0 || !is_feasible(target, frames) {
        return Ok(graph.constant(Tensor::scalar(T::neg_infinity())));
    }
    let ext = ExpandedTarget::new(target);
    let s_len = ext.len();
    let ninf = T::neg_infinity();

    let emit_idx = |t: usize| -> Vec<Option<usize>> {
        ext.states().iter().map(|&c| Some(t * classes + c)).collect()
    };
    let first: Vec<Option<usize>> = (0..s_len)
        .map(|s| (s < 2).then(|| ext.states()[s]))
        .collect();
    let mut alpha = log_probs.gather(&first, &[s_len], ninf)?;

    let stay_idx: Vec<Option<usize>> = (0..s_len).map(|s| s.checked_sub(1)).collect();
    let skip_idx: Vec<Option<usize>> = (0..s_len)
        .map(|s| ext.can_skip(s).then(|| s - 2))
        .collect();
    let any_skip = skip_idx.iter().any(Option::is_some);

    for t in 1..frames {
        let emit = log_probs.gather(&emit_idx(t), &[s_len], ninf)?;
        let from_prev = alpha.gather(&stay_idx, &[s_len], ninf)?;
        let mut acc = alpha.log_add_exp(from_prev)?;
        if any_skip {
            let from_skip = alpha.gather(&skip_idx, &[s_len], ninf)?;
            acc = acc.log_add_exp(from_skip)?;
        }
        alpha = acc.add(emit)?;
    }
    let ends: Vec<Option<usize>> = if s_len == 1 {
        vec![Some(0)]
    } else {
        vec![Some(s_len - 1), Some(s_len - 2)]
    };
    let n = ends.len();
    alpha.gather(&ends, &[n], ninf)?.logsumexp(0)
}

/// Value-only convenience around [`ctc_log_likelihood`].
pub fn ctc_log_likelihood_value<T: Scalar>(log_probs: &Tensor<T>, target: &[usize]) -> Result<T> {
    let g = Graph::new();
    let lp = g.constant(log_probs.clone());
    Ok(ctc_log_likelihood(lp, target)?.item())
}

/// Largest search space [`ctc_brute_force`] accepts.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

/// Exhaustive oracle: enumerates all `(|V|+1)^T'` alignments.
pub fn ctc_brute_force<T: Scalar>(log_probs: &Tensor<T>, target: &[usize]) -> Result<T> {
    let (frames, classes) = check_inputs(log_probs.shape(), target)?;
    let space = (classes as u64).checked_pow(frames as u32);
    if space.is_none_or(|s| s > BRUTE_FORCE_LIMIT) {
        return Err(Error::contract(format!(
            "brute force over {classes}^{frames} alignments exceeds {BRUTE_FORCE_LIMIT}"
        )));
    }
    let mut terms = Vec::new();
    let mut align = vec![0usize; frames];
    loop {
        if collapse(&align) == target {
            let mut lp = T::zero();
            for (t, &a) in align.iter().enumerate() {
                lp += log_probs.row(t)[a];
            }
            terms.push(lp);
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == frames {
                return Ok(logsumexp_slice(&terms));
            }
            align[i] += 1;
            if align[i] < classes {
                break;
            }
            align[i] = 0;
            i += 1;
        }
    }
}

fn logsumexp_slice<T: Scalar>(xs: &[T]) -> T {
    let mx = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + xs.iter().map(|&x| (x - mx).exp()).sum::<T>().ln()
}

/// Frame-wise argmax (ties go to the lowest id), then [`collapse`].
pub fn greedy_decode<T: Scalar>(log_probs: &Tensor<T>) -> Vec<usize> {
    collapse(&best_path(log_probs))
}

/// Frame-wise argmax path, ties broken towards the lowest id.
pub fn best_path<T: Scalar>(log_probs: &Tensor<T>) -> Vec<usize> {
    (0..log_probs.rows())
        .map(|t| {
            let row = log_probs.row(t);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Outcome of a randomized comparison against [`ctc_brute_force`].
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub trials: usize,
    pub max_abs_err: f64,
    /// `(trial, frames, vocab, target, error)` of each instance over tolerance.
    pub failures: Vec<(usize, usize, usize, Vec<usize>, f64)>,
}

/// Random instance `trial` of an oracle run: log-normalized rows over
/// `vocab + 1` classes and a target of up to `max_tokens` tokens.
pub fn oracle_instance(
    seed: u64,
    trial: usize,
    max_frames: usize,
    max_vocab: usize,
    max_tokens: usize,
) -> Result<(Tensor<f64>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
    let frames = rng.random_range(1..=max_frames);
    let vocab = rng.random_range(1..=max_vocab);
    let len = rng.random_range(0..=max_tokens);
    let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..=vocab)).collect();
    let mut data = Vec::with_capacity(frames * (vocab + 1));
    for _ in 0..frames {
        let row: Vec<f64> = (0..=vocab).map(|_| rng.random_range(-3.0..3.0)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        data.extend(row.iter().map(|v| v - lse));
    }
    Ok((Tensor::new(&[frames, vocab + 1], data)?, target))
}

/// Compares the dynamic program with exhaustive enumeration on `trials`
/// random instances. Two `-inf` values agree exactly.
pub fn oracle_check(
    trials: usize,
    max_frames: usize,
    max_vocab: usize,
    max_tokens: usize,
    seed: u64,
    tol: f64,
) -> Result<OracleReport> {
    if max_frames == 0 || max_vocab == 0 {
        return Err(Error::contract("oracle needs at least one frame and one token"));
    }
    let mut report = OracleReport {
        trials,
        max_abs_err: 0.0,
        failures: Vec::new(),
    };
    for trial in 0..trials {
        let (lp, target) = oracle_instance(seed, trial, max_frames, max_vocab, max_tokens)?;
        let fast = ctc_log_likelihood_value(&lp, &target)?;
        let slow = ctc_brute_force(&lp, &target)?;
        let err = if fast == slow { 0.0 } else { (fast - slow).abs() };
        let err = if err.is_nan() { f64::INFINITY } else { err };
        report.max_abs_err = report.max_abs_err.max(err);
        if !(err < tol) {
            report.failures.push((trial, lp.rows(), lp.cols() - 1, target, err));
        }
    }
    Ok(report)
}
