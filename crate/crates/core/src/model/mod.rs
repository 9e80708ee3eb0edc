//! The latent-variable CTC model: prior estimator, posterior estimator with
//! encoder sharing, CTC decoder over latents, compatibility path,
//! intermediate CTC and self-distillation.

mod checkpoint;
mod losses;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use losses::{
    gaussian_kl, kl_diag_gaussian, self_distillation_loss, BatchLosses, LossBreakdown,
    LossWeights, TermVars,
};

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::blocks::{
    BlockConfig, ConformerLayer, Ctx, FeedForward, FrameMask, Frontend, GaussianHead, LayerNorm,
    Linear, ParamBuilder, TransformerCaLayer,
};
use crate::data::token_time_mask;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Activation, ParamId, ParameterSet, Tensor, Var};

pub(crate) const SCOPE_PRIOR: &str = "prior";
pub(crate) const SCOPE_POSTERIOR: &str = "posterior";
pub(crate) const SCOPE_SAMPLE: &str = "sample";
pub(crate) const SCOPE_DECODER: &str = "decoder";
pub(crate) const SCOPE_COMPAT: &str = "compat";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_feat: usize,
    pub blocks: BlockConfig,
    /// Prior estimator layers.
    pub l_enc: usize,
    /// Decoder layers.
    pub l_dec: usize,
    /// Posterior cross-attention layers.
    pub l_pst: usize,
    /// Prior layer (1-based) whose output is the posterior's query.
    pub share_layer: usize,
    /// Decoder layer (1-based) feeding the intermediate CTC losses.
    pub inter_layer: usize,
    pub d_lat: usize,
    /// Fraction of token embeddings zeroed during training.
    pub token_mask_fraction: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 8,
            d_feat: 16,
            blocks: BlockConfig::default(),
            l_enc: 3,
            l_dec: 4,
            l_pst: 2,
            share_layer: 2,
            inter_layer: 2,
            d_lat: 8,
            token_mask_fraction: 0.1,
        }
    }
}

impl ModelConfig {
    /// Sizes of the LibriSpeech-100 recipe.
    pub fn ls100(vocab: usize, d_feat: usize) -> Self {
        Self {
            vocab,
            d_feat,
            blocks: BlockConfig {
                d_att: 256,
                n_heads: 4,
                d_ff: 1024,
                conv_kernel: 15,
                dropout: 0.1,
                ff_activation: Activation::Swish,
                head_activation: Activation::Tanh,
            },
            l_enc: 3,
            l_dec: 12,
            l_pst: 2,
            share_layer: 2,
            inter_layer: 4,
            d_lat: 64,
            token_mask_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.blocks.validate()?;
        let positive = [
            ("task.vocab", self.vocab),
            ("task.d_feat", self.d_feat),
            ("model.l_enc", self.l_enc),
            ("model.l_dec", self.l_dec),
            ("model.l_pst", self.l_pst),
            ("model.d_lat", self.d_lat),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.share_layer == 0 || self.share_layer > self.l_enc {
            return Err(Error::config("model.share_layer", "need 1 <= share_layer <= l_enc"));
        }
        if self.inter_layer == 0 || self.inter_layer >= self.l_dec {
            return Err(Error::config("model.inter_layer", "need 1 <= inter_layer < l_dec"));
        }
        if !(0.0..=1.0).contains(&self.token_mask_fraction) {
            return Err(Error::config("model.token_mask_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Output classes including the blank.
    pub fn classes(&self) -> usize {
        self.vocab + 1
    }
}

/// Diagonal Gaussian given by mean and log-variance, `[U, d_lat]` each.
#[derive(Clone, Copy)]
pub struct LatentGaussian<'g, T> {
    pub mu: Var<'g, T>,
    pub logvar: Var<'g, T>,
}

impl<'g, T: Scalar> LatentGaussian<'g, T> {
    /// Builds from an explicit standard deviation; it must be positive.
    pub fn from_sigma(mu: Var<'g, T>, sigma: Var<'g, T>) -> Result<Self> {
        if sigma.value().data().iter().any(|&s| !(s > T::zero())) {
            return Err(Error::contract("standard deviation must be positive"));
        }
        Ok(Self {
            mu,
            logvar: sigma.ln().scale(2.0),
        })
    }

    pub fn sigma(&self) -> Var<'g, T> {
        self.logvar.scale(0.5).exp()
    }
}

/// Subsampling frontend followed by Conformer layers.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub frontend: Frontend,
    pub layers: Vec<ConformerLayer>,
}

impl Encoder {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("prior");
        Ok(Self {
            frontend: Frontend::new(&mut b, "frontend", cfg.d_feat, &cfg.blocks)?,
            layers: (0..cfg.l_enc)
                .map(|i| ConformerLayer::new(&mut b, &format!("layers.{i}"), &cfg.blocks))
                .collect::<Result<_>>()?,
        })
    }

    /// Every layer's output and the subsampled mask.
    fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        mask: &FrameMask,
    ) -> Result<(Vec<Var<'g, T>>, FrameMask)> {
        let (mut h, mask) = self.frontend.forward(cx, x, mask)?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(cx, h, &mask)?;
            outs.push(h);
        }
        Ok((outs, mask))
    }
}

/// Decoder from latents to alignment posteriors. The output projection is
/// shared by the final and intermediate CTC heads.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub lift: Linear,
    pub layers: Vec<ConformerLayer>,
    pub out: Linear,
    inter_layer: usize,
}

/// Frame log-posteriors of the final and intermediate heads.
#[derive(Clone, Copy)]
pub struct DecoderOutput<'g, T> {
    /// `[T', |V|+1]`.
    pub logp: Var<'g, T>,
    pub inter_logp: Var<'g, T>,
    /// Activation of the intermediate layer.
    pub inter_hidden: Var<'g, T>,
}

impl Decoder {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("decoder");
        let d = cfg.blocks.d_att;
        Ok(Self {
            lift: b.linear("lift", cfg.d_lat, d, true)?,
            layers: (0..cfg.l_dec)
                .map(|i| ConformerLayer::new(&mut b, &format!("layers.{i}"), &cfg.blocks))
                .collect::<Result<_>>()?,
            out: b.linear("out", d, cfg.classes(), true)?,
            inter_layer: cfg.inter_layer,
        })
    }

    fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        z: Var<'g, T>,
        mask: &FrameMask,
    ) -> Result<DecoderOutput<'g, T>> {
        let mut h = self.lift.forward(cx, z)?;
        let mut inter = None;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(cx, h, mask)?;
            if i + 1 == self.inter_layer {
                inter = Some(h);
            }
        }
        let inter_hidden = inter.ok_or_else(|| Error::contract("intermediate layer out of range"))?;
        Ok(DecoderOutput {
            logp: self.out.forward(cx, h)?.log_softmax(1)?,
            inter_logp: self.out.forward(cx, inter_hidden)?.log_softmax(1)?,
            inter_hidden,
        })
    }
}

/// Token embedding plus cross-attention layers queried by a prior activation.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub embed: ParamId,
    pub layers: Vec<TransformerCaLayer>,
    pub norm: LayerNorm,
    pub head: GaussianHead,
}

impl Posterior {
    fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, cfg: &ModelConfig) -> Result<Self> {
        let mut b = b.sub("posterior");
        let d = cfg.blocks.d_att;
        Ok(Self {
            embed: b.tensor("embed", &[cfg.classes(), d], crate::blocks::Init::Normal(1.0))?,
            layers: (0..cfg.l_pst)
                .map(|i| TransformerCaLayer::new(&mut b, &format!("layers.{i}"), &cfg.blocks))
                .collect::<Result<_>>()?,
            norm: b.layer_norm("norm", d)?,
            head: GaussianHead::new(&mut b, "head", cfg.d_lat, &cfg.blocks)?,
        })
    }
}

/// Sinusoidal absolute positions `[n, d]` for the token side.
pub(crate) fn absolute_positions<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * d);
    for pos in 0..n {
        for k in 0..d {
            let a = pos as f64 * 10000f64.powf(-((k / 2 * 2) as f64) / d as f64);
            data.push(T::lit(if k % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(&[n, d], data).expect("position table shape")
}

/// Test hooks that pin the posterior; both default to off.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    /// Replace the posterior mean by the prior mean.
    pub posterior_mean_from_prior: bool,
    /// Use the posterior mean as the latent sample.
    pub zero_posterior_sigma: bool,
}

/// Prior estimator output for one utterance.
pub struct PriorOutput<'g, T> {
    pub gaussian: LatentGaussian<'g, T>,
    /// Output of every prior layer.
    pub layers: Vec<Var<'g, T>>,
    /// Validity of the subsampled frames.
    pub mask: FrameMask,
}

/// All hidden quantities of one training forward pass.
pub struct ForwardOutputs<'g, T> {
    pub prior: PriorOutput<'g, T>,
    pub posterior: LatentGaussian<'g, T>,
    pub z: Var<'g, T>,
    /// Decoder on the sampled latent.
    pub dec: DecoderOutput<'g, T>,
    /// Decoder on the prior mean.
    pub compat: DecoderOutput<'g, T>,
}

#[derive(Debug, Clone)]
pub struct LvCtc<T> {
    config: ModelConfig,
    params: ParameterSet<T>,
    pub encoder: Encoder,
    pub prior_head: GaussianHead,
    pub posterior: Posterior,
    pub decoder: Decoder,
    pub overrides: Overrides,
    /// Teacher log-posteriors by utterance id. When set, self-distillation
    /// reads these instead of the live sampled path, which makes the
    /// stop-gradient objective an ordinary function of the parameters for
    /// finite-difference checks.
    pub frozen_teachers: Option<Arc<BTreeMap<String, Tensor<T>>>>,
}

impl<T: Scalar> LvCtc<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let mut b = ParamBuilder::new(&mut params, seed);
        let encoder = Encoder::new(&mut b, &config)?;
        let prior_head = GaussianHead::new(&mut b.sub("prior"), "head", config.d_lat, &config.blocks)?;
        let posterior = Posterior::new(&mut b, &config)?;
        let decoder = Decoder::new(&mut b, &config)?;
        // The final and intermediate heads and the compatibility path all
        // read the one decoder.out slot.
        for alias in ["compat.out", "intermediate.out"] {
            params.alias(&format!("{alias}.weight"), "decoder.out.weight")?;
            params.alias(&format!("{alias}.bias"), "decoder.out.bias")?;
        }
        Ok(Self {
            config,
            params,
            encoder,
            prior_head,
            posterior,
            decoder,
            overrides: Overrides::default(),
            frozen_teachers: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    pub fn context<'g>(&'g self, graph: &'g crate::tensor::Graph<T>, training: bool) -> Ctx<'g, T> {
        Ctx::new(graph, &self.params, training, self.config.blocks.dropout)
    }

    /// Frontend, prior layers and the prior Gaussian heads.
    pub fn prior_estimate<'g>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        mask: &FrameMask,
    ) -> Result<PriorOutput<'g, T>> {
        cx.enter(SCOPE_PRIOR);
        let (layers, mask) = self.encoder.forward(cx, x, mask)?;
        let top = *layers.last().expect("at least one prior layer");
        let (mu, logvar) = self.prior_head.forward(cx, top)?;
        Ok(PriorOutput {
            gaussian: LatentGaussian { mu, logvar },
            layers,
            mask,
        })
    }

    /// Posterior over latents given padded `tokens` (validity in
    /// `token_mask`) and the shared prior activation as query.
    pub fn posterior_estimate<'g>(
        &self,
        cx: &Ctx<'g, T>,
        tokens: &[usize],
        token_mask: &FrameMask,
        shared: Var<'g, T>,
        frame_mask: &FrameMask,
    ) -> Result<LatentGaussian<'g, T>> {
        cx.enter(SCOPE_POSTERIOR);
        token_mask.check(tokens.len(), "token")?;
        let n_valid = token_mask.valid_count();
        if n_valid == 0 {
            return Err(Error::contract("posterior needs at least one token"));
        }
        let d = self.config.blocks.d_att;
        let mut emb = cx.p(self.posterior.embed).embedding(tokens)?;
        if cx.training() && self.config.token_mask_fraction > 0.0 {
            emb = token_time_mask(emb, n_valid, self.config.token_mask_fraction, &mut cx.rng())?;
        }
        let memory = emb.add(cx.constant(absolute_positions(tokens.len(), d)))?;
        let mut h = shared;
        for layer in &self.posterior.layers {
            h = layer.forward(cx, h, frame_mask, memory, token_mask)?;
        }
        let h = self.posterior.norm.forward(cx, h)?;
        let (mu, logvar) = self.posterior.head.forward(cx, h)?;
        Ok(LatentGaussian { mu, logvar })
    }

    /// `Z = mu + sigma * eps`, with `eps` keyed by position so that padding
    /// does not change the draws of real frames.
    pub fn sample_latent<'g>(&self, cx: &Ctx<'g, T>, g: &LatentGaussian<'g, T>) -> Result<Var<'g, T>> {
        cx.enter(SCOPE_SAMPLE);
        let shape = g.mu.shape();
        let eps = cx.constant(cx.normal(shape[0], shape[1]));
        g.mu.add(g.sigma().mul(eps)?)
    }

    /// Decoder on a latent sequence.
    pub fn decode_alignment_logposterior<'g>(
        &self,
        cx: &Ctx<'g, T>,
        z: Var<'g, T>,
        mask: &FrameMask,
    ) -> Result<DecoderOutput<'g, T>> {
        cx.enter(SCOPE_DECODER);
        self.decoder.forward(cx, z, mask)
    }

    /// The same decoder applied to the prior mean.
    pub fn compat_alignment_logposterior<'g>(
        &self,
        cx: &Ctx<'g, T>,
        mu_prior: Var<'g, T>,
        mask: &FrameMask,
    ) -> Result<DecoderOutput<'g, T>> {
        cx.enter(SCOPE_COMPAT);
        self.decoder.forward(cx, mu_prior, mask)
    }

    /// Full training-time forward pass for one (possibly padded) utterance.
    pub fn forward<'g>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        frame_mask: &FrameMask,
        tokens: &[usize],
        token_mask: &FrameMask,
    ) -> Result<ForwardOutputs<'g, T>> {
        let prior = self.prior_estimate(cx, x, frame_mask)?;
        let shared = prior.layers[self.config.share_layer - 1];
        let mut posterior = self.posterior_estimate(cx, tokens, token_mask, shared, &prior.mask)?;
        if self.overrides.posterior_mean_from_prior {
            posterior.mu = prior.gaussian.mu;
        }
        let z = if self.overrides.zero_posterior_sigma {
            posterior.mu
        } else {
            self.sample_latent(cx, &posterior)?
        };
        let dec = self.decode_alignment_logposterior(cx, z, &prior.mask)?;
        let compat = self.compat_alignment_logposterior(cx, prior.gaussian.mu, &prior.mask)?;
        Ok(ForwardOutputs {
            prior,
            posterior,
            z,
            dec,
            compat,
        })
    }
}

/// Plain CTC model made of the compatibility path alone: frontend, prior
/// layers, prior mean head, decoder. Parameter names match [`LvCtc`], so the
/// same seed gives the same initial values.
#[derive(Debug, Clone)]
pub struct VanillaCtc<T> {
    config: ModelConfig,
    params: ParameterSet<T>,
    pub encoder: Encoder,
    pub mean_head: FeedForward,
    pub decoder: Decoder,
}

impl<T: Scalar> VanillaCtc<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        let mut b = ParamBuilder::new(&mut params, seed);
        let encoder = Encoder::new(&mut b, &config)?;
        let mean_head = b.sub("prior").sub("head").feed_forward(
            "mean",
            config.blocks.d_att,
            config.blocks.d_ff,
            config.d_lat,
            config.blocks.head_activation,
        )?;
        let decoder = Decoder::new(&mut b, &config)?;
        Ok(Self {
            config,
            params,
            encoder,
            mean_head,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<T> {
        &mut self.params
    }

    pub fn logposterior<'g>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        mask: &FrameMask,
    ) -> Result<(DecoderOutput<'g, T>, FrameMask)> {
        cx.enter(SCOPE_PRIOR);
        let (layers, mask) = self.encoder.forward(cx, x, mask)?;
        let mu = self.mean_head.forward_plain(cx, *layers.last().expect("prior layer"))?;
        cx.enter(SCOPE_COMPAT);
        Ok((self.decoder.forward(cx, mu, &mask)?, mask))
    }
}
