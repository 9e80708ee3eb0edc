//! Inference: single-step greedy decoding through the prior mean, iterative
//! refinement through the posterior, and error-rate scoring.

use rayon::prelude::*;

use crate::blocks::FrameMask;
use crate::ctc::greedy_decode;
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::model::LvCtc;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Hypotheses of every refinement round; index 0 is the single-step result.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace<T> {
    pub hypotheses: Vec<Vec<usize>>,
    /// Frame log-posteriors behind each hypothesis.
    pub log_posteriors: Vec<Tensor<T>>,
    /// True when a round reproduced its input hypothesis.
    pub converged: bool,
    /// Refinement rounds executed (posterior passes, or reuses of an empty
    /// hypothesis).
    pub iterations: usize,
}

impl<T> DecodeTrace<T> {
    pub fn initial(&self) -> &[usize] {
        &self.hypotheses[0]
    }

    pub fn last(&self) -> &[usize] {
        self.hypotheses.last().expect("trace is never empty")
    }
}

/// Greedy decoding of the compatibility path: no sampling, no refinement.
pub fn decode_single_step<T: Scalar>(model: &LvCtc<T>, features: &Tensor<T>) -> Result<Vec<usize>> {
    let graph = Graph::new();
    let cx = model.context(&graph, false);
    let prior = model.prior_estimate(&cx, cx.constant(features.clone()), &FrameMask::all_valid(features.rows()))?;
    let out = model.compat_alignment_logposterior(&cx, prior.gaussian.mu, &prior.mask)?;
    Ok(greedy_decode(&out.logp.value()))
}

/// Single-step decoding followed by up to `k` rounds that feed the current
/// hypothesis through the posterior (using its mean) and decode again.
/// Stops early at a fixed point. An empty hypothesis cannot condition the
/// posterior, so it is carried forward unchanged, which is itself a fixed
/// point.
pub fn decode_iterative<T: Scalar>(model: &LvCtc<T>, features: &Tensor<T>, k: usize) -> Result<DecodeTrace<T>> {
    if k == 0 {
        return Err(Error::contract("iterative decoding needs at least one round"));
    }
    let graph = Graph::new();
    let cx = model.context(&graph, false);
    let prior = model.prior_estimate(&cx, cx.constant(features.clone()), &FrameMask::all_valid(features.rows()))?;
    let compat = model.compat_alignment_logposterior(&cx, prior.gaussian.mu, &prior.mask)?.logp.value();
    let mut trace = DecodeTrace {
        hypotheses: vec![greedy_decode(&compat)],
        log_posteriors: vec![compat],
        converged: false,
        iterations: 0,
    };
    let shared = prior.layers[model.config().share_layer - 1];
    for _ in 0..k {
        let prev = trace.last().to_vec();
        let (hyp, logp) = if prev.is_empty() {
            (prev.clone(), trace.log_posteriors.last().expect("nonempty").clone())
        } else {
            let mask = FrameMask::all_valid(prev.len());
            let post = model.posterior_estimate(&cx, &prev, &mask, shared, &prior.mask)?;
            let logp = model.decode_alignment_logposterior(&cx, post.mu, &prior.mask)?.logp.value();
            (greedy_decode(&logp), logp)
        };
        trace.iterations += 1;
        let fixed = hyp == prev;
        trace.hypotheses.push(hyp);
        trace.log_posteriors.push(logp);
        if fixed {
            trace.converged = true;
            break;
        }
    }
    Ok(trace)
}

/// Decodes a set in parallel; `k = 0` means single-step only.
pub fn decode_set<T: Scalar>(model: &LvCtc<T>, utts: &[Utterance<T>], k: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    utts.par_iter()
        .map(|u| {
            if k == 0 {
                Ok(vec![decode_single_step(model, &u.features)?])
            } else {
                Ok(decode_iterative(model, &u.features, k)?.hypotheses)
            }
        })
        .collect()
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Total edit distance over total reference length.
pub fn error_rate<S: PartialEq>(refs: &[Vec<S>], hyps: &[Vec<S>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::contract(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let total: usize = refs.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::contract("references have zero total length"));
    }
    let errors: usize = refs.iter().zip(hyps).map(|(r, h)| edit_distance(r, h)).sum();
    Ok(errors as f64 / total as f64)
}
