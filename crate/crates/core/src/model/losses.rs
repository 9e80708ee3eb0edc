use rayon::prelude::*;
use serde::Serialize;

use super::{ForwardOutputs, LatentGaussian, LvCtc, VanillaCtc};
use crate::blocks::{mix_seed, stable_hash, FrameMask};
use crate::ctc::{ctc_log_likelihood, is_feasible};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Coefficients of the training objective and the free-bits threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub dec: f64,
    pub kl: f64,
    pub cp: f64,
    pub ictc_prior: f64,
    pub ictc_pst: f64,
    pub sd: f64,
    /// The KL term is dropped when the batch-mean KL is below this.
    pub free_bits: f64,
}

impl Default for LossWeights {
    /// Intermediate CTC plus self-distillation.
    fn default() -> Self {
        Self::from_slice(&[0.073, 0.1, 0.656, 0.008, 0.073, 0.090])
    }
}

impl LossWeights {
    /// `(dec, kl, cp, ictc_prior, ictc_pst, sd)`; missing entries are zero;
    /// free bits 0.5.
    pub fn from_slice(w: &[f64]) -> Self {
        let at = |i: usize| w.get(i).copied().unwrap_or(0.0);
        Self {
            dec: at(0),
            kl: at(1),
            cp: at(2),
            ictc_prior: at(3),
            ictc_pst: at(4),
            sd: at(5),
            free_bits: 0.5,
        }
    }

    /// Only the compatibility CTC term.
    pub fn compat_only() -> Self {
        Self::from_slice(&[0.0, 0.0, 1.0])
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("loss.dec", self.dec),
            ("loss.kl", self.kl),
            ("loss.cp", self.cp),
            ("loss.ictc_prior", self.ictc_prior),
            ("loss.ictc_pst", self.ictc_pst),
            ("loss.sd", self.sd),
            ("loss.free_bits", self.free_bits),
        ];
        for (key, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Weighted sum of the non-KL terms, skipping zero weights entirely so
    /// that unused terms cannot leak non-finite gradients.
    fn rest<'g, T: Scalar>(&self, t: &TermVars<'g, T>) -> Result<Option<Var<'g, T>>> {
        let pairs = [
            (self.dec, t.elbo_dec),
            (self.cp, t.ctc_cp),
            (self.ictc_prior, t.ictc_prior),
            (self.ictc_pst, t.ictc_pst),
            (self.sd, t.sd),
        ];
        weighted_sum(&pairs)
    }
}

fn weighted_sum<'g, T: Scalar>(pairs: &[(f64, Var<'g, T>)]) -> Result<Option<Var<'g, T>>> {
    let mut acc: Option<Var<'g, T>> = None;
    for &(w, v) in pairs {
        if w == 0.0 {
            continue;
        }
        let term = v.scale(w);
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term)?,
        });
    }
    Ok(acc)
}

/// Values of every objective term; `total` is maximized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub elbo_dec: f64,
    pub kl: f64,
    pub ctc_cp: f64,
    pub ictc_prior: f64,
    pub ictc_pst: f64,
    pub sd: f64,
    pub total: f64,
    /// True when the KL term was dropped by the free-bits rule.
    pub kl_gated: bool,
}

impl LossBreakdown {
    fn from_parts(p: [f64; 6], w: &LossWeights, kl_gated: bool) -> Self {
        let mut b = Self {
            elbo_dec: p[0],
            kl: p[1],
            ctc_cp: p[2],
            ictc_prior: p[3],
            ictc_pst: p[4],
            sd: p[5],
            total: 0.0,
            kl_gated,
        };
        b.total = b.recompose(w);
        b
    }

    /// The weighted objective from the stored parts.
    pub fn recompose(&self, w: &LossWeights) -> f64 {
        let kl = if self.kl_gated { 0.0 } else { w.kl * self.kl };
        w.dec * self.elbo_dec - kl
            + w.cp * self.ctc_cp
            + w.ictc_prior * self.ictc_prior
            + w.ictc_pst * self.ictc_pst
            + w.sd * self.sd
    }
}

/// Differentiable objective terms of one utterance.
#[derive(Clone, Copy)]
pub struct TermVars<'g, T> {
    pub elbo_dec: Var<'g, T>,
    pub kl: Var<'g, T>,
    pub ctc_cp: Var<'g, T>,
    pub ictc_prior: Var<'g, T>,
    pub ictc_pst: Var<'g, T>,
    pub sd: Var<'g, T>,
}

impl<T: Scalar> TermVars<'_, T> {
    fn values(&self) -> [f64; 6] {
        [self.elbo_dec, self.kl, self.ctc_cp, self.ictc_prior, self.ictc_pst, self.sd]
            .map(|v| v.item().to_f64_lossy())
    }
}

/// Rows of `x` at valid positions.
fn valid_rows<'g, T: Scalar>(x: Var<'g, T>, mask: &FrameMask) -> Result<Var<'g, T>> {
    let shape = x.shape();
    mask.check(shape[0], "row")?;
    if mask.valid_count() == shape[0] {
        return Ok(x);
    }
    let d = shape[1];
    let idx: Vec<Option<usize>> = (0..shape[0])
        .filter(|&r| mask.is_valid(r))
        .flat_map(|r| (r * d..(r + 1) * d).map(Some))
        .collect();
    x.gather(&idx, &[mask.valid_count(), d], T::zero())
}

/// Closed-form `KL(q || p)` for diagonal Gaussians, summed over latent
/// dimensions and averaged over valid frames.
pub fn gaussian_kl<'g, T: Scalar>(
    q: &LatentGaussian<'g, T>,
    p: &LatentGaussian<'g, T>,
    mask: &FrameMask,
) -> Result<Var<'g, T>> {
    let shapes = [q.mu.shape(), q.logvar.shape(), p.mu.shape(), p.logvar.shape()];
    if shapes.iter().any(|s| *s != shapes[0]) || shapes[0].len() != 2 {
        return Err(Error::shape(format!("gaussian_kl over shapes {shapes:?}")));
    }
    if mask.valid_count() == 0 {
        return Err(Error::contract("gaussian_kl over zero valid frames"));
    }
    let (mq, lq) = (valid_rows(q.mu, mask)?, valid_rows(q.logvar, mask)?);
    let (mp, lp) = (valid_rows(p.mu, mask)?, valid_rows(p.logvar, mask)?);
    let log_ratio = lp.sub(lq)?.scale(0.5);
    let num = lq.exp().add(mq.sub(mp)?.square())?;
    let quad = num.div(lp.exp().scale(2.0))?;
    let per = log_ratio.add(quad)?.add_scalar(-0.5);
    Ok(per.sum().scale(1.0 / mask.valid_count() as f64))
}

/// `KL(q || p)` summed over coordinates, from standard deviations.
pub fn kl_diag_gaussian(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64> {
    let n = mu_q.len();
    if sigma_q.len() != n || mu_p.len() != n || sigma_p.len() != n {
        return Err(Error::shape("kl_diag_gaussian: length mismatch"));
    }
    if sigma_q.iter().chain(sigma_p).any(|&s| !(s > 0.0)) {
        return Err(Error::contract("standard deviation must be positive"));
    }
    Ok((0..n)
        .map(|i| {
            let (sq, sp) = (sigma_q[i], sigma_p[i]);
            let d = mu_q[i] - mu_p[i];
            (sp / sq).ln() + (sq * sq + d * d) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

/// `-mean_t KL(student_t || teacher_t)` over valid frames; the teacher is
/// detached. Never positive.
pub fn self_distillation_loss<'g, T: Scalar>(
    student: Var<'g, T>,
    teacher: Var<'g, T>,
    mask: &FrameMask,
) -> Result<Var<'g, T>> {
    if student.shape() != teacher.shape() {
        return Err(Error::shape(format!(
            "self-distillation between {:?} and {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    if mask.valid_count() == 0 {
        return Err(Error::contract("self-distillation over zero valid frames"));
    }
    let s = valid_rows(student, mask)?;
    let t = valid_rows(teacher.detach(), mask)?;
    let kl = s.exp().mul(s.sub(t)?)?.sum();
    Ok(kl.scale(-1.0 / mask.valid_count() as f64))
}

/// Batch-mean breakdown, per-utterance breakdowns (`None` for skipped
/// utterances) and, when requested, gradients of `-total` per slot.
#[derive(Debug, Clone)]
pub struct BatchLosses<T> {
    pub mean: LossBreakdown,
    pub per_utterance: Vec<Option<LossBreakdown>>,
    pub grads: Option<Vec<Option<Tensor<T>>>>,
    pub used: usize,
    /// Sampled-path log-posteriors per utterance, padded rows included.
    pub teachers: Vec<Option<Tensor<T>>>,
}

struct UttResult<T> {
    parts: [f64; 6],
    teacher: Tensor<T>,
    rest_grads: Option<Vec<Option<Tensor<T>>>>,
    kl_grads: Option<Vec<Option<Tensor<T>>>>,
}

fn add_grads<T: Scalar>(acc: &mut [Option<Tensor<T>>], g: Vec<Option<Tensor<T>>>) {
    for (a, g) in acc.iter_mut().zip(g) {
        let Some(g) = g else { continue };
        match a {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += *y;
                }
            }
            None => *a = Some(g),
        }
    }
}

/// Stream seed of one utterance within a step.
pub(crate) fn utterance_seed(seed: u64, id: &str) -> u64 {
    mix_seed(seed, stable_hash(id))
}

/// Skips utterances the frontend or CTC cannot handle.
fn feasible<T: Scalar>(batch: &Batch<T>, i: usize) -> bool {
    let frames = batch.frame_masks[i].valid_count();
    let tokens = batch.tokens_of(i);
    let ok = frames >= crate::blocks::Frontend::MIN_FRAMES
        && !tokens.is_empty()
        && is_feasible(tokens, crate::blocks::subsampled_len(frames));
    if !ok {
        log::warn!(
            "skipping utterance {}: {} frames cannot align {} tokens",
            batch.ids[i],
            frames,
            tokens.len()
        );
    }
    ok
}

impl<T: Scalar> LvCtc<T> {
    /// Objective terms from one forward pass; `tokens` are the unpadded targets.
    pub fn terms<'g>(
        &self,
        out: &ForwardOutputs<'g, T>,
        tokens: &[usize],
        teacher: Option<&Tensor<T>>,
    ) -> Result<TermVars<'g, T>> {
        let mask = &out.prior.mask;
        let teacher = match teacher {
            Some(t) => out.dec.logp.graph().constant(t.clone()),
            None => out.dec.logp,
        };
        let ctc = |logp: Var<'g, T>| ctc_log_likelihood(valid_rows(logp, mask)?, tokens);
        Ok(TermVars {
            elbo_dec: ctc(out.dec.logp)?,
            kl: gaussian_kl(&out.posterior, &out.prior.gaussian, mask)?,
            ctc_cp: ctc(out.compat.logp)?,
            ictc_prior: ctc(out.compat.inter_logp)?,
            ictc_pst: ctc(out.dec.inter_logp)?,
            sd: self_distillation_loss(out.compat.logp, teacher, mask)?,
        })
    }

    /// Evaluates the objective over a batch. Utterances run independently
    /// (in parallel) on streams keyed by `seed` and their ids; results are
    /// reduced in batch order. The free-bits gate compares the batch-mean KL
    /// against the threshold, so the KL gradient of each utterance is kept
    /// apart until every utterance has been seen.
    pub fn compute_losses(
        &self,
        batch: &Batch<T>,
        weights: &LossWeights,
        training: bool,
        seed: u64,
        want_grads: bool,
    ) -> Result<BatchLosses<T>> {
        let keep: Vec<bool> = (0..batch.len()).map(|i| feasible(batch, i)).collect();
        let used = keep.iter().filter(|&&k| k).count();
        let scale = if used > 0 { 1.0 / used as f64 } else { 0.0 };
        let results: Vec<Option<UttResult<T>>> = (0..batch.len())
            .into_par_iter()
            .map(|i| {
                if !keep[i] {
                    return Ok(None);
                }
                let graph = Graph::new();
                let cx = self.context(&graph, training);
                cx.set_stream(utterance_seed(seed, &batch.ids[i]));
                let x = cx.constant(batch.features_of(i));
                let out = self.forward(
                    &cx,
                    x,
                    &batch.frame_masks[i],
                    &batch.tokens[i],
                    &batch.token_masks[i],
                )?;
                let frozen = match &self.frozen_teachers {
                    Some(map) => Some(map.get(&batch.ids[i]).ok_or_else(|| {
                        Error::contract(format!("no frozen teacher for {}", batch.ids[i]))
                    })?),
                    None => None,
                };
                let terms = self.terms(&out, batch.tokens_of(i), frozen)?;
                let backward = |objective: Var<'_, T>, factor: f64| -> Result<_> {
                    let mut g = graph.backward(objective.scale(factor))?;
                    Ok(Some(cx.bound().slot_grads(&mut g)))
                };
                let (mut rest_grads, mut kl_grads) = (None, None);
                if want_grads {
                    if let Some(obj) = weights.rest(&terms)? {
                        rest_grads = backward(obj, -scale)?;
                    }
                    if weights.kl != 0.0 {
                        kl_grads = backward(terms.kl, weights.kl * scale)?;
                    }
                }
                Ok(Some(UttResult {
                    parts: terms.values(),
                    teacher: out.dec.logp.value(),
                    rest_grads,
                    kl_grads,
                }))
            })
            .collect::<Result<_>>()?;

        let mut sums = [0.0; 6];
        for r in results.iter().flatten() {
            for (s, p) in sums.iter_mut().zip(r.parts) {
                *s += p;
            }
        }
        let means = sums.map(|s| s * scale);
        let kl_gated = used > 0 && means[1] < weights.free_bits;
        let mean = LossBreakdown::from_parts(means, weights, kl_gated);
        let per_utterance = results
            .iter()
            .map(|r| r.as_ref().map(|r| LossBreakdown::from_parts(r.parts, weights, kl_gated)))
            .collect();
        let teachers = results.iter().map(|r| r.as_ref().map(|r| r.teacher.clone())).collect();
        let grads = if want_grads {
            let mut acc: Vec<Option<Tensor<T>>> = vec![None; self.params().len()];
            for r in results.into_iter().flatten() {
                if let Some(g) = r.rest_grads {
                    add_grads(&mut acc, g);
                }
                if !kl_gated {
                    if let Some(g) = r.kl_grads {
                        add_grads(&mut acc, g);
                    }
                }
            }
            Some(acc)
        } else {
            None
        };
        Ok(BatchLosses {
            mean,
            per_utterance,
            grads,
            used,
            teachers,
        })
    }
}

impl<T: Scalar> VanillaCtc<T> {
    /// Mean CTC log-likelihood over the batch and gradients of its negation,
    /// reduced exactly as [`LvCtc::compute_losses`] reduces its terms.
    pub fn compute_losses(
        &self,
        batch: &Batch<T>,
        training: bool,
        seed: u64,
        want_grads: bool,
    ) -> Result<(f64, Option<Vec<Option<Tensor<T>>>>)> {
        let keep: Vec<bool> = (0..batch.len()).map(|i| feasible(batch, i)).collect();
        let used = keep.iter().filter(|&&k| k).count();
        let scale = if used > 0 { 1.0 / used as f64 } else { 0.0 };
        let results: Vec<Option<(f64, Option<Vec<Option<Tensor<T>>>>)>> = (0..batch.len())
            .into_par_iter()
            .map(|i| {
                if !keep[i] {
                    return Ok(None);
                }
                let graph = Graph::new();
                let cx = crate::blocks::Ctx::new(&graph, self.params(), training, self.config().blocks.dropout);
                cx.set_stream(utterance_seed(seed, &batch.ids[i]));
                let x = cx.constant(batch.features_of(i));
                let (out, mask) = self.logposterior(&cx, x, &batch.frame_masks[i])?;
                let ll = ctc_log_likelihood(valid_rows(out.logp, &mask)?, batch.tokens_of(i))?;
                let grads = match (want_grads, weighted_sum(&[(1.0, ll)])?) {
                    (true, Some(obj)) => {
                        let mut g = graph.backward(obj.scale(-scale))?;
                        Some(cx.bound().slot_grads(&mut g))
                    }
                    _ => None,
                };
                Ok(Some((ll.item().to_f64_lossy(), grads)))
            })
            .collect::<Result<_>>()?;
        let mut sum = 0.0;
        let mut acc: Vec<Option<Tensor<T>>> = vec![None; self.params().len()];
        for (ll, g) in results.into_iter().flatten() {
            sum += ll;
            if let Some(g) = g {
                add_grads(&mut acc, g);
            }
        }
        Ok((sum * scale, want_grads.then_some(acc)))
    }
}
