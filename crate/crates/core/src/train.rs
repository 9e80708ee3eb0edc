//! Step-based training: seeded batch stream, Noam-scheduled Adam, periodic
//! validation with best-checkpoint selection, and resumable state.
//!
//! `metrics.jsonl` depends only on the configuration, so two runs with the
//! same seeds write identical files; wall-clock time goes to `timing.jsonl`.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::mix_seed;
use crate::config::RunConfig;
use crate::data::{Batch, Generator, Utterance};
use crate::decoding::{decode_set, error_rate};
use crate::error::{Error, Result};
use crate::model::save_checkpoint;
use crate::model::{LossBreakdown, LvCtc};
use crate::scalar::Scalar;
use crate::tensor::{noam_lr, OptimizerState, Tensor};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
/// Full-precision parameters and optimizer moments for exact resumption.
pub const STATE_FILE: &str = "latest.state";

const STATE_MAGIC: &[u8] = b"LVCTCSTATE1\n";
const BATCH_STREAM: u64 = 0x6261_7463_6865_7300;
const DROPOUT_STREAM: u64 = 0x6472_6f70_6f75_7400;

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Utterances that contributed (infeasible ones are skipped).
    pub used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_ter_greedy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_ter_iterative: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Validation {
    pub greedy: f64,
    pub iterative: f64,
}

/// Token error rates of single-step and `k`-round decoding on `utts`.
pub fn validate<T: Scalar>(model: &LvCtc<T>, utts: &[Utterance<T>], k: usize) -> Result<Validation> {
    let traces = decode_set(model, utts, k)?;
    let refs: Vec<Vec<usize>> = utts.iter().map(|u| u.tokens.clone()).collect();
    let greedy: Vec<Vec<usize>> = traces.iter().map(|t| t[0].clone()).collect();
    let last: Vec<Vec<usize>> = traces.iter().map(|t| t.last().cloned().unwrap_or_default()).collect();
    Ok(Validation {
        greedy: error_rate(&refs, &greedy)?,
        iterative: error_rate(&refs, &last)?,
    })
}

/// Held-out set named by the configuration.
pub fn validation_set<T: Scalar>(config: &RunConfig) -> Result<Vec<Utterance<T>>> {
    let generator = Generator::new(config.task.clone())?;
    Ok(generator.dataset("valid", config.train.valid_seed, config.train.valid_size))
}

/// The training batch of `step`; a pure function of the seed and step.
pub fn training_batch<T: Scalar>(generator: &Generator, seed: u64, step: u64, size: usize) -> Result<Batch<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ BATCH_STREAM, step));
    let utts: Vec<Utterance<T>> = (0..size)
        .map(|i| generator.generate(&format!("train-{step:07}-{i:03}"), &mut rng))
        .collect();
    Batch::from_utterances(&utts.iter().collect::<Vec<_>>())
}

/// Stream seed for the dropout, sampling and masking draws of `step`.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    mix_seed(seed ^ DROPOUT_STREAM, step)
}

pub struct Trainer<T> {
    config: RunConfig,
    model: LvCtc<T>,
    optim: OptimizerState<T>,
    generator: Generator,
    valid: Vec<Utterance<T>>,
    step: u64,
    best: f64,
    out_dir: PathBuf,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run writing into `out_dir`; existing logs there are truncated.
    pub fn new(config: RunConfig, out_dir: &Path) -> Result<Self> {
        config.validate()?;
        let model = LvCtc::new(config.model.clone(), config.train.seed)?;
        let optim = OptimizerState::new(model.params());
        std::fs::create_dir_all(out_dir)?;
        File::create(out_dir.join(METRICS_FILE))?;
        File::create(out_dir.join(TIMING_FILE))?;
        Ok(Self {
            generator: Generator::new(config.task.clone())?,
            valid: validation_set(&config)?,
            config,
            model,
            optim,
            step: 0,
            best: f64::INFINITY,
            out_dir: out_dir.to_path_buf(),
        })
    }

    /// Continues the run saved in `out_dir`, appending to its logs.
    pub fn resume(config: RunConfig, out_dir: &Path) -> Result<Self> {
        config.validate()?;
        let mut model = LvCtc::new(config.model.clone(), config.train.seed)?;
        let path = out_dir.join(STATE_FILE);
        let mut bytes = Vec::new();
        File::open(&path)?.read_to_end(&mut bytes)?;
        let (step, best, optim) = decode_state(&bytes, &path, &mut model)?;
        Ok(Self {
            generator: Generator::new(config.task.clone())?,
            valid: validation_set(&config)?,
            config,
            model,
            optim,
            step,
            best,
            out_dir: out_dir.to_path_buf(),
        })
    }

    pub fn model(&self) -> &LvCtc<T> {
        &self.model
    }

    pub fn into_model(self) -> LvCtc<T> {
        self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Best validation error so far (iterative decoding).
    pub fn best(&self) -> f64 {
        self.best
    }

    /// One optimizer step; returns its metrics record (without validation).
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let step = self.step + 1;
        let tr = &self.config.train;
        let batch = training_batch(&self.generator, tr.seed, step, tr.batch_size)?;
        let losses = self.model.compute_losses(
            &batch,
            &self.config.weights,
            true,
            step_seed(tr.seed, step),
            true,
        )?;
        let grads = losses.grads.expect("gradients requested");
        let finite = losses.mean.total.is_finite()
            && grads.iter().flatten().all(Tensor::all_finite);
        if !finite {
            return Err(Error::NonFinite {
                step,
                batch: batch.ids.join(","),
            });
        }
        let lr = noam_lr(step, self.config.optim.warmup, self.config.optim.peak_lr)?;
        if losses.used > 0 {
            let params = self.model.params_mut();
            let zeros: Vec<_> = params.values().map(|v| Tensor::zeros(v.shape())).collect();
            let filled = grads.into_iter().zip(zeros).map(|(g, z)| Some(g.unwrap_or(z))).collect();
            params.set_grads(filled)?;
            self.optim.step(params, lr, &self.config.optim.adam)?;
            params.clear_grads();
        }
        self.step = step;
        Ok(MetricsRecord {
            step,
            lr,
            loss: losses.mean,
            used: losses.used,
            valid_ter_greedy: None,
            valid_ter_iterative: None,
        })
    }

    /// Trains until `total_steps`, validating every interval and at the end,
    /// and saving checkpoints and state after each validation.
    pub fn run(&mut self, total_steps: u64) -> Result<Option<Validation>> {
        let mut metrics = BufWriter::new(OpenOptions::new().append(true).create(true).open(self.out_dir.join(METRICS_FILE))?);
        let mut timing = BufWriter::new(OpenOptions::new().append(true).create(true).open(self.out_dir.join(TIMING_FILE))?);
        let mut last = None;
        while self.step < total_steps {
            let started = Instant::now();
            let mut record = self.train_step()?;
            let due = self.step % self.config.train.valid_interval == 0 || self.step == total_steps;
            if due {
                let v = validate(&self.model, &self.valid, self.config.train.iterations)?;
                record.valid_ter_greedy = Some(v.greedy);
                record.valid_ter_iterative = Some(v.iterative);
                log::info!(
                    "step {} total {:.3} valid greedy {:.4} iterative {:.4}",
                    self.step,
                    record.loss.total,
                    v.greedy,
                    v.iterative
                );
                if v.iterative < self.best {
                    self.best = v.iterative;
                    save_checkpoint(&self.out_dir.join(BEST_CHECKPOINT), &self.model)?;
                }
                save_checkpoint(&self.out_dir.join(LATEST_CHECKPOINT), &self.model)?;
                self.save_state()?;
                last = Some(v);
            } else if self.step % 50 == 0 {
                log::info!("step {} total {:.3} kl {:.3}", self.step, record.loss.total, record.loss.kl);
            }
            serde_json::to_writer(&mut metrics, &record)?;
            metrics.write_all(b"\n")?;
            let seconds = started.elapsed().as_secs_f64();
            writeln!(timing, "{{\"step\":{},\"seconds\":{seconds}}}", self.step)?;
            if due {
                metrics.flush()?;
                timing.flush()?;
            }
        }
        metrics.flush()?;
        timing.flush()?;
        Ok(last)
    }

    fn save_state(&self) -> Result<()> {
        let path = self.out_dir.join(STATE_FILE);
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, encode_state(self.step, self.best, &self.model, &self.optim))?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}

/// Magic, step, best score, slot count, then per slot the parameter,
/// first and second moments as little-endian f64.
fn encode_state<T: Scalar>(step: u64, best: f64, model: &LvCtc<T>, optim: &OptimizerState<T>) -> Vec<u8> {
    let mut out = STATE_MAGIC.to_vec();
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&optim.step_count().to_le_bytes());
    out.extend_from_slice(&best.to_le_bytes());
    let params = model.params();
    let slots = params.slots();
    out.extend_from_slice(&(slots.len() as u64).to_le_bytes());
    for (id, _) in slots {
        let i = id.index();
        for t in [params.get(id), &optim.first_moments()[i], &optim.second_moments()[i]] {
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
    }
    out
}

fn decode_state<T: Scalar>(bytes: &[u8], path: &Path, model: &mut LvCtc<T>) -> Result<(u64, f64, OptimizerState<T>)> {
    let bad = |msg: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut rest = bytes.strip_prefix(STATE_MAGIC).ok_or_else(|| bad("bad magic"))?;
    let mut word = || -> Result<[u8; 8]> {
        let (head, tail) = rest.split_at_checked(8).ok_or_else(|| bad("truncated"))?;
        rest = tail;
        Ok(head.try_into().expect("eight bytes"))
    };
    let step = u64::from_le_bytes(word()?);
    let optim_step = u64::from_le_bytes(word()?);
    let best = f64::from_le_bytes(word()?);
    let slots = model.params().slots().into_iter().map(|(id, _)| id).collect::<Vec<_>>();
    if u64::from_le_bytes(word()?) != slots.len() as u64 {
        return Err(bad("parameter count does not match the configuration"));
    }
    let mut first = vec![Tensor::zeros(&[0]); model.params().len()];
    let mut second = first.clone();
    for id in slots {
        let shape = model.params().get(id).shape().to_vec();
        let mut read = || -> Result<Tensor<T>> {
            let n = u64::from_le_bytes(word()?) as usize;
            if n != shape.iter().product::<usize>() {
                return Err(bad("parameter shape does not match the configuration"));
            }
            let data = (0..n).map(|_| Ok(T::lit(f64::from_le_bytes(word()?)))).collect::<Result<_>>()?;
            Tensor::new(&shape, data)
        };
        let value = read()?;
        first[id.index()] = read()?;
        second[id.index()] = read()?;
        model.params_mut().set(id, value)?;
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok((step, best, OptimizerState::from_parts(optim_step, first, second)))
}
