//! Run configuration: a flat `key = value` file with `#` comments.
//!
//! Every key is optional and falls back to the desk-scale default; unknown
//! keys and malformed values are errors naming the key.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::blocks::BlockConfig;
use crate::data::SyntheticTaskSpec;
use crate::error::{Error, Result};
use crate::model::{LossWeights, ModelConfig};
use crate::tensor::AdamConfig;

/// Parsed `key = value` lines that have not been consumed yet.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Record {
                line: i + 1,
                msg: format!("expected `key = value`, got {raw:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::Record {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::config(k, "key given twice"));
            }
        }
        Ok(Self { entries })
    }

    /// Removes and parses `key` if present.
    pub fn take<F>(&mut self, key: &str) -> Result<Option<F>>
    where
        F: FromStr,
        F::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| Error::config(key, format!("cannot parse {v:?}: {e}"))),
        }
    }

    fn set<F>(&mut self, key: &str, slot: &mut F) -> Result<()>
    where
        F: FromStr,
        F::Err: Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn require<F>(&mut self, key: &str) -> Result<F>
    where
        F: FromStr,
        F::Err: Display,
    {
        self.take(key)?
            .ok_or_else(|| Error::config(key, "missing"))
    }

    /// Fails on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_keys().next() {
            Some(k) => Err(Error::config(k, "unknown key")),
            None => Ok(()),
        }
    }
}

fn write_kv(out: &mut String, key: &str, value: impl Display) {
    out.push_str(&format!("{key} = {value}\n"));
}

/// Architecture keys, shared by run configs and checkpoints.
pub fn model_to_kv(m: &ModelConfig) -> String {
    let mut s = String::new();
    write_kv(&mut s, "task.vocab", m.vocab);
    write_kv(&mut s, "task.d_feat", m.d_feat);
    write_kv(&mut s, "model.d_att", m.blocks.d_att);
    write_kv(&mut s, "model.n_heads", m.blocks.n_heads);
    write_kv(&mut s, "model.d_ff", m.blocks.d_ff);
    write_kv(&mut s, "model.conv_kernel", m.blocks.conv_kernel);
    write_kv(&mut s, "model.dropout", m.blocks.dropout);
    write_kv(&mut s, "model.ff_activation", m.blocks.ff_activation);
    write_kv(&mut s, "model.head_activation", m.blocks.head_activation);
    write_kv(&mut s, "model.l_enc", m.l_enc);
    write_kv(&mut s, "model.l_dec", m.l_dec);
    write_kv(&mut s, "model.l_pst", m.l_pst);
    write_kv(&mut s, "model.share_layer", m.share_layer);
    write_kv(&mut s, "model.inter_layer", m.inter_layer);
    write_kv(&mut s, "model.d_lat", m.d_lat);
    write_kv(&mut s, "model.token_mask_fraction", m.token_mask_fraction);
    s
}

/// Reads every architecture key except the two task keys, which the caller
/// supplies. Missing keys keep the values already in `m`.
fn model_keys(kv: &mut KvFile, m: &mut ModelConfig) -> Result<()> {
    let b: &mut BlockConfig = &mut m.blocks;
    kv.set("model.d_att", &mut b.d_att)?;
    kv.set("model.n_heads", &mut b.n_heads)?;
    kv.set("model.d_ff", &mut b.d_ff)?;
    kv.set("model.conv_kernel", &mut b.conv_kernel)?;
    kv.set("model.dropout", &mut b.dropout)?;
    kv.set("model.ff_activation", &mut b.ff_activation)?;
    kv.set("model.head_activation", &mut b.head_activation)?;
    kv.set("model.l_enc", &mut m.l_enc)?;
    kv.set("model.l_dec", &mut m.l_dec)?;
    kv.set("model.l_pst", &mut m.l_pst)?;
    kv.set("model.share_layer", &mut m.share_layer)?;
    kv.set("model.inter_layer", &mut m.inter_layer)?;
    kv.set("model.d_lat", &mut m.d_lat)?;
    kv.set("model.token_mask_fraction", &mut m.token_mask_fraction)?;
    Ok(())
}

/// Strict inverse of [`model_to_kv`]: every key must be present.
pub fn model_from_kv(text: &str) -> Result<ModelConfig> {
    let mut kv = KvFile::parse(text)?;
    let mut m = ModelConfig {
        vocab: kv.require("task.vocab")?,
        d_feat: kv.require("task.d_feat")?,
        ..ModelConfig::default()
    };
    let expected = model_to_kv(&m)
        .lines()
        .filter_map(|l| l.split_once(" = ").map(|(k, _)| k.to_string()))
        .collect::<Vec<_>>();
    for key in &expected[2..] {
        if !kv.entries.contains_key(key) {
            return Err(Error::config(key.clone(), "missing"));
        }
    }
    model_keys(&mut kv, &mut m)?;
    kv.finish()?;
    m.validate()?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup: u64,
    pub adam: AdamConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 0.002,
            warmup: 300,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    /// Validate (and refresh the best checkpoint) every this many steps.
    pub valid_interval: u64,
    pub valid_size: usize,
    /// Seeds model initialization, batch sampling and dropout.
    pub seed: u64,
    /// Seeds the held-out set; independent of the training stream.
    pub valid_seed: u64,
    /// Refinement iterations used by validation and decoding.
    pub iterations: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 3000,
            valid_interval: 500,
            valid_size: 200,
            seed: 1,
            valid_seed: 1_000_003,
            iterations: 3,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub task: SyntheticTaskSpec,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let mut c = RunConfig::default();

        let t = &mut c.task;
        kv.set("task.vocab", &mut t.vocab)?;
        kv.set("task.min_tokens", &mut t.min_tokens)?;
        kv.set("task.max_tokens", &mut t.max_tokens)?;
        kv.set("task.min_frames_per_token", &mut t.min_steps_per_token)?;
        kv.set("task.max_frames_per_token", &mut t.max_steps_per_token)?;
        kv.set("task.frames_per_step", &mut t.frames_per_step)?;
        kv.set("task.d_feat", &mut t.d_feat)?;
        kv.set("task.noise", &mut t.noise)?;
        kv.set("task.prototype_seed", &mut t.prototype_seed)?;
        kv.set("task.allow_repeats", &mut t.allow_repeats)?;

        model_keys(&mut kv, &mut c.model)?;
        c.model.vocab = c.task.vocab;
        c.model.d_feat = c.task.d_feat;

        let w = &mut c.weights;
        kv.set("loss.dec", &mut w.dec)?;
        kv.set("loss.kl", &mut w.kl)?;
        kv.set("loss.cp", &mut w.cp)?;
        kv.set("loss.ictc_prior", &mut w.ictc_prior)?;
        kv.set("loss.ictc_pst", &mut w.ictc_pst)?;
        kv.set("loss.sd", &mut w.sd)?;
        kv.set("loss.free_bits", &mut w.free_bits)?;

        let o = &mut c.optim;
        kv.set("optim.peak_lr", &mut o.peak_lr)?;
        kv.set("optim.warmup", &mut o.warmup)?;
        kv.set("optim.beta1", &mut o.adam.beta1)?;
        kv.set("optim.beta2", &mut o.adam.beta2)?;
        kv.set("optim.eps", &mut o.adam.eps)?;
        kv.set("optim.weight_decay", &mut o.adam.weight_decay)?;

        let tr = &mut c.train;
        kv.set("train.batch_size", &mut tr.batch_size)?;
        kv.set("train.steps", &mut tr.steps)?;
        kv.set("train.valid_interval", &mut tr.valid_interval)?;
        kv.set("train.valid_size", &mut tr.valid_size)?;
        kv.set("train.seed", &mut tr.seed)?;
        kv.set("train.valid_seed", &mut tr.valid_seed)?;
        kv.set("train.iterations", &mut tr.iterations)?;
        kv.set("train.out_dir", &mut tr.out_dir)?;

        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.weights.validate()?;
        let o = &self.optim;
        if !(o.peak_lr > 0.0 && o.peak_lr.is_finite()) {
            return Err(Error::config("optim.peak_lr", "must be positive"));
        }
        if o.warmup == 0 {
            return Err(Error::config("optim.warmup", "must be positive"));
        }
        for (key, v) in [("optim.beta1", o.adam.beta1), ("optim.beta2", o.adam.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(o.adam.eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        if !(o.adam.weight_decay >= 0.0) {
            return Err(Error::config("optim.weight_decay", "must be non-negative"));
        }
        let t = &self.train;
        let positive = [
            ("train.batch_size", t.batch_size as u64),
            ("train.steps", t.steps),
            ("train.valid_interval", t.valid_interval),
            ("train.valid_size", t.valid_size as u64),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let t = &self.task;
        write_kv(&mut s, "task.vocab", t.vocab);
        write_kv(&mut s, "task.min_tokens", t.min_tokens);
        write_kv(&mut s, "task.max_tokens", t.max_tokens);
        write_kv(&mut s, "task.min_frames_per_token", t.min_steps_per_token);
        write_kv(&mut s, "task.max_frames_per_token", t.max_steps_per_token);
        write_kv(&mut s, "task.frames_per_step", t.frames_per_step);
        write_kv(&mut s, "task.d_feat", t.d_feat);
        write_kv(&mut s, "task.noise", t.noise);
        write_kv(&mut s, "task.prototype_seed", t.prototype_seed);
        write_kv(&mut s, "task.allow_repeats", t.allow_repeats);
        for line in model_to_kv(&self.model).lines().skip(2) {
            s.push_str(line);
            s.push('\n');
        }
        let w = &self.weights;
        write_kv(&mut s, "loss.dec", w.dec);
        write_kv(&mut s, "loss.kl", w.kl);
        write_kv(&mut s, "loss.cp", w.cp);
        write_kv(&mut s, "loss.ictc_prior", w.ictc_prior);
        write_kv(&mut s, "loss.ictc_pst", w.ictc_pst);
        write_kv(&mut s, "loss.sd", w.sd);
        write_kv(&mut s, "loss.free_bits", w.free_bits);
        let o = &self.optim;
        write_kv(&mut s, "optim.peak_lr", o.peak_lr);
        write_kv(&mut s, "optim.warmup", o.warmup);
        write_kv(&mut s, "optim.beta1", o.adam.beta1);
        write_kv(&mut s, "optim.beta2", o.adam.beta2);
        write_kv(&mut s, "optim.eps", o.adam.eps);
        write_kv(&mut s, "optim.weight_decay", o.adam.weight_decay);
        let tr = &self.train;
        write_kv(&mut s, "train.batch_size", tr.batch_size);
        write_kv(&mut s, "train.steps", tr.steps);
        write_kv(&mut s, "train.valid_interval", tr.valid_interval);
        write_kv(&mut s, "train.valid_size", tr.valid_size);
        write_kv(&mut s, "train.seed", tr.seed);
        write_kv(&mut s, "train.valid_seed", tr.valid_seed);
        write_kv(&mut s, "train.iterations", tr.iterations);
        write_kv(&mut s, "train.out_dir", tr.out_dir.display());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn values_and_comments() {
        let c = RunConfig::parse("model.l_dec = 6   # deeper\ntask.vocab=5\nloss.kl = 0.2\n").unwrap();
        assert_eq!(c.model.l_dec, 6);
        assert_eq!(c.model.vocab, 5);
        assert_eq!(c.task.vocab, 5);
        assert_eq!(c.weights.kl, 0.2);
    }

    #[test]
    fn unknown_key_is_named() {
        match RunConfig::parse("model.d_att = 32\nmodel.depth = 3\n") {
            Err(Error::Config { key, msg }) => {
                assert_eq!(key, "model.depth");
                assert_eq!(msg, "unknown key");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_values_are_named() {
        for (text, key) in [
            ("model.n_heads = two", "model.n_heads"),
            ("model.n_heads = 3", "model.n_heads"),
            ("model.share_layer = 4", "model.share_layer"),
            ("model.inter_layer = 4", "model.inter_layer"),
            ("loss.sd = -1", "loss.sd"),
            ("optim.warmup = 0", "optim.warmup"),
            ("model.ff_activation = gelu", "model.ff_activation"),
        ] {
            match RunConfig::parse(text) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(RunConfig::parse("just words"), Err(Error::Record { line: 1, .. })));
        assert!(matches!(RunConfig::parse("a = 1\na = 2"), Err(Error::Config { .. })));
    }

    #[test]
    fn round_trip_through_text() {
        let mut c = RunConfig::default();
        c.model.l_dec = 7;
        c.weights.sd = 0.25;
        c.train.out_dir = PathBuf::from("x/y");
        assert_eq!(RunConfig::parse(&c.to_kv()).unwrap(), c);
    }

    #[test]
    fn model_block_is_strict() {
        let m = ModelConfig::default();
        let text = model_to_kv(&m);
        assert_eq!(model_from_kv(&text).unwrap(), m);
        let missing: String = text.lines().filter(|l| !l.starts_with("model.d_lat")).map(|l| format!("{l}\n")).collect();
        assert!(matches!(model_from_kv(&missing), Err(Error::Config { key, .. }) if key == "model.d_lat"));
    }

    #[test]
    fn shipped_presets_parse() {
        let default = RunConfig::parse(include_str!("../../../configs/default.conf")).unwrap();
        assert_eq!(default, RunConfig::default());

        let ls100 = RunConfig::parse(include_str!("../../../configs/ls100.conf")).unwrap();
        let m = &ls100.model;
        assert_eq!((m.l_enc, m.l_dec, m.share_layer, m.d_lat), (3, 12, 2, 64));
        assert_eq!(m, &ModelConfig::ls100(26, 80));
        let w = &ls100.weights;
        assert_eq!((w.dec, w.kl, w.cp, w.free_bits), (0.09, 0.1, 0.81, 0.5));
        assert_eq!((ls100.optim.peak_lr, ls100.optim.warmup), (0.002, 15000));
    }
}
