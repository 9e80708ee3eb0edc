//! Central finite-difference comparison of analytic parameter gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::blocks::BlockConfig;
use crate::data::{Batch, Generator, SyntheticTaskSpec, Utterance};
use crate::error::{Error, Result};
use crate::model::{LossWeights, LvCtc, ModelConfig};
use crate::tensor::{ParameterSet, Tensor};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Coordinates probed per parameter group; `None` probes all of them.
    pub max_coords: Option<usize>,
    /// Norm below which both gradients count as zero; keeps the ratio from
    /// amplifying rounding noise on vanishing groups.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: None,
            floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub coords: usize,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `|a - n| / max(|a|, |n|, floor)` over the probed coordinates.
    pub rel_err: f64,
}

/// Compares `analytic` (indexed by slot) with central differences of `eval`.
pub fn compare(
    params: &mut ParameterSet<f64>,
    analytic: &[Option<Tensor<f64>>],
    eval: impl Fn(&ParameterSet<f64>) -> Result<f64>,
    opts: &GradcheckOptions,
) -> Result<Vec<GroupCheck>> {
    if analytic.len() != params.len() {
        return Err(Error::contract("one analytic gradient per slot is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let slots: Vec<_> = params
        .slots()
        .into_iter()
        .map(|(id, n)| (id, n.to_string()))
        .collect();
    let mut out = Vec::with_capacity(slots.len());
    for (id, name) in slots {
        let n = params.get(id).len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let grad = analytic[id.index()].clone().unwrap_or_else(|| Tensor::zeros(params.get(id).shape()));
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &coords {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(params);
            params.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(params);
            params.get_mut(id).data_mut()[i] = orig;
            let num = (plus? - minus?) / (2.0 * opts.step);
            let a = grad.data()[i];
            diff += (a - num) * (a - num);
            na += a * a;
            nn += num * num;
        }
        let (diff, na, nn) = (diff.sqrt(), na.sqrt(), nn.sqrt());
        out.push(GroupCheck {
            name,
            coords: coords.len(),
            analytic_norm: na,
            numeric_norm: nn,
            rel_err: diff / na.max(nn).max(opts.floor),
        });
    }
    Ok(out)
}

/// Shapes of the model probed by the `gradcheck` command.
pub fn miniature_config() -> ModelConfig {
    ModelConfig {
        vocab: 3,
        d_feat: 4,
        blocks: BlockConfig {
            d_att: 8,
            n_heads: 2,
            d_ff: 8,
            conv_kernel: 3,
            dropout: 0.1,
            ..BlockConfig::default()
        },
        l_enc: 2,
        l_dec: 2,
        l_pst: 1,
        share_layer: 1,
        inter_layer: 1,
        d_lat: 4,
        token_mask_fraction: 0.1,
    }
}

pub fn miniature_task() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        vocab: 3,
        min_tokens: 1,
        max_tokens: 3,
        min_steps_per_token: 2,
        max_steps_per_token: 3,
        d_feat: 4,
        noise: 0.3,
        ..SyntheticTaskSpec::default()
    }
}

/// Every term weighted and the KL gate held open, so all six terms feed
/// the gradient.
pub fn miniature_weights() -> LossWeights {
    let mut w = LossWeights::from_slice(&[0.3, 0.2, 0.5, 0.4, 0.6, 0.7]);
    w.free_bits = 0.0;
    w
}

/// Checks the full training objective of `model` on `batch` in training
/// mode (dropout, sampling and token masking replayed from `seed`). The
/// distillation teacher is frozen at its unperturbed value, matching the
/// stop-gradient of the analytic pass. `tamper` may corrupt the analytic
/// gradients before comparison.
pub fn check_objective(
    model: &mut LvCtc<f64>,
    batch: &Batch<f64>,
    weights: &LossWeights,
    seed: u64,
    opts: &GradcheckOptions,
    tamper: impl FnOnce(&mut [Option<Tensor<f64>>]),
) -> Result<Vec<GroupCheck>> {
    let saved = model.frozen_teachers.take();
    let base = model.compute_losses(batch, weights, true, seed, false)?;
    let mut frozen = BTreeMap::new();
    for (id, t) in batch.ids.iter().zip(base.teachers) {
        if let Some(t) = t {
            frozen.insert(id.clone(), t);
        }
    }
    model.frozen_teachers = Some(Arc::new(frozen));
    let result = (|| {
        let mut analytic = model
            .compute_losses(batch, weights, true, seed, true)?
            .grads
            .expect("gradients requested");
        tamper(&mut analytic);
        let config = model.config().clone();
        let (overrides, frozen) = (model.overrides, model.frozen_teachers.clone());
        compare(
            model.params_mut(),
            &analytic,
            |p| {
                let mut probe = LvCtc::new(config.clone(), 0)?;
                *probe.params_mut() = p.clone();
                probe.overrides = overrides;
                probe.frozen_teachers = frozen.clone();
                Ok(-probe.compute_losses(batch, weights, true, seed, false)?.mean.total)
            },
            opts,
        )
    })();
    model.frozen_teachers = saved;
    result
}

/// The `gradcheck` command: a seeded miniature model and a two-utterance
/// batch, every parameter group probed.
pub fn check_miniature(seed: u64, opts: &GradcheckOptions) -> Result<Vec<GroupCheck>> {
    let mut model = LvCtc::new(miniature_config(), seed)?;
    let utts: Vec<Utterance<f64>> = Generator::new(miniature_task())?.dataset("gc", seed, 2);
    let batch = Batch::from_utterances(&utts.iter().collect::<Vec<_>>())?;
    check_objective(&mut model, &batch, &miniature_weights(), seed, opts, |_| {})
}
