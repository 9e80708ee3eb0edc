//! Neural building blocks: linear/norm/feed-forward primitives, relative
//! position self-attention, cross-attention, Conformer and Transformer
//! layers, the subsampling frontend and Gaussian parameter heads.

mod attention;
mod frontend;
mod layers;

pub use attention::{CrossAttention, RelSelfAttention};
pub use frontend::{subsampled_len, Frontend, GaussianHead};
pub use layers::{ConformerLayer, ConvModule, TransformerCaLayer};

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Activation, Bound, Graph, ParamId, ParameterSet, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub d_att: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Depthwise kernel length of the Conformer convolution module (odd).
    pub conv_kernel: usize,
    pub dropout: f64,
    /// Feed-forward modules inside attention layers.
    pub ff_activation: Activation,
    /// Hidden layer of the latent mean/variance heads.
    pub head_activation: Activation,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            d_att: 32,
            n_heads: 2,
            d_ff: 64,
            conv_kernel: 7,
            dropout: 0.1,
            ff_activation: Activation::Swish,
            head_activation: Activation::Tanh,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_att == 0 || self.n_heads == 0 || !self.d_att.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "model.n_heads",
                format!("d_att {} not divisible by {} heads", self.d_att, self.n_heads),
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::config("model.conv_kernel", "kernel length must be odd"));
        }
        if self.d_ff == 0 {
            return Err(Error::config("model.d_ff", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if self.ff_activation == Activation::Glu || self.head_activation == Activation::Glu {
            return Err(Error::config("model.activation", "glu is reserved for the conv module"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_att / self.n_heads
    }
}

/// Per-position validity; `true` marks a real (unpadded) position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMask(Vec<bool>);

impl FrameMask {
    pub fn all_valid(len: usize) -> Self {
        Self(vec![true; len])
    }

    /// First `valid` of `len` positions are real.
    pub fn prefix(len: usize, valid: usize) -> Self {
        Self((0..len).map(|i| i < valid).collect())
    }

    pub fn from_flags(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn valid_count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }

    pub(crate) fn check(&self, len: usize, what: &str) -> Result<()> {
        if self.0.len() != len {
            return Err(Error::shape(format!(
                "{what} mask has {} entries for {len} positions",
                self.0.len()
            )));
        }
        Ok(())
    }

    /// Zeroes the rows of a `[len, d]` tensor at padded positions.
    pub(crate) fn zero_padded<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        if self.0.iter().all(|&v| v) {
            return Ok(x);
        }
        let shape = x.shape();
        self.check(shape[0], "row")?;
        let d = shape[1];
        let flags: Vec<bool> = self.0.iter().flat_map(|&v| std::iter::repeat_n(!v, d)).collect();
        x.masked_fill(&flags, T::zero())
    }
}

/// Forward-pass context: the graph, lazily bound parameters, and keyed
/// randomness for dropout and sampling.
///
/// Random draws are a pure function of (scope seed, call number within the
/// scope, element position). Padding rows therefore never shift the draws of
/// real rows, and two networks that run the same sub-path under the same
/// scope name see the same dropout masks.
pub struct Ctx<'g, T> {
    bound: Bound<'g, T>,
    training: bool,
    dropout: f64,
    base: Cell<u64>,
    scope: Cell<u64>,
    calls: Cell<u64>,
}

impl<'g, T: Scalar> Ctx<'g, T> {
    pub fn new(graph: &'g Graph<T>, params: &'g ParameterSet<T>, training: bool, dropout: f64) -> Self {
        Self {
            bound: Bound::new(graph, params),
            training,
            dropout,
            base: Cell::new(0),
            scope: Cell::new(0),
            calls: Cell::new(0),
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.bound.graph()
    }

    pub fn bound(&self) -> &Bound<'g, T> {
        &self.bound
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        self.bound.param(id)
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph().constant(t)
    }

    /// Sets the base seed and enters the unnamed scope.
    pub fn set_stream(&self, seed: u64) {
        self.base.set(seed);
        self.enter("");
    }

    /// Restarts the call counter under a named scope of the current stream.
    pub fn enter(&self, scope: &str) {
        self.scope.set(mix_seed(self.base.get(), stable_hash(scope)));
        self.calls.set(0);
    }

    /// Key for the next random draw in the current scope.
    pub fn next_key(&self) -> u64 {
        let c = self.calls.get();
        self.calls.set(c + 1);
        mix_seed(self.scope.get(), c)
    }

    /// A generator seeded from the next key, for draws that are not per element.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.next_key())
    }

    pub fn dropout(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        if !self.training || self.dropout == 0.0 {
            return Ok(x);
        }
        let key = self.next_key();
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let keep = T::lit(1.0 / (1.0 - self.dropout));
        let mask = (0..n)
            .map(|i| {
                if keyed_uniform(key, i as u64) < self.dropout {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        x.mul(self.constant(Tensor::new(&shape, mask)?))
    }

    /// Standard normal draws for a `[rows, cols]` tensor, keyed by position.
    pub fn normal(&self, rows: usize, cols: usize) -> Tensor<T> {
        let key = self.next_key();
        let data = (0..rows * cols)
            .map(|i| T::lit(keyed_normal(key, i as u64)))
            .collect();
        Tensor::new(&[rows, cols], data).expect("normal shape")
    }
}

/// Uniform in `[0, 1)`.
pub(crate) fn keyed_uniform(key: u64, index: u64) -> f64 {
    (mix_seed(key, index) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Box-Muller over two keyed uniforms.
pub(crate) fn keyed_normal(key: u64, index: u64) -> f64 {
    let u1 = 1.0 - keyed_uniform(key, 2 * index);
    let u2 = keyed_uniform(key, 2 * index + 1);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// FNV-1a, used to derive stable per-name seeds.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Registers parameters. Each tensor is drawn from a generator seeded by the
/// model seed and the parameter's name, so initial values do not depend on
/// registration order.
pub struct ParamBuilder<'a, T> {
    params: &'a mut ParameterSet<T>,
    seed: u64,
    prefix: String,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(params: &'a mut ParameterSet<T>, seed: u64) -> Self {
        Self {
            params,
            seed,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = self.full(name);
        ParamBuilder {
            params: self.params,
            seed: self.seed,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = self.full(name);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, stable_hash(&full)));
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| match init {
                Init::Zeros => T::zero(),
                Init::Ones => T::one(),
                Init::Uniform(a) => T::lit(rng.random_range(-a..=a)),
                Init::Normal(s) => T::lit(s * rng.sample::<f64, _>(StandardNormal)),
            })
            .collect();
        self.params.insert(&full, Tensor::new(shape, data)?)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Linear> {
        let mut b = self.sub(name);
        let w = b.tensor("weight", &[d_in, d_out], Init::Uniform(1.0 / (d_in as f64).sqrt()))?;
        let bias = if bias {
            Some(b.tensor("bias", &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { weight: w, bias })
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<LayerNorm> {
        let mut b = self.sub(name);
        Ok(LayerNorm {
            gain: b.tensor("gain", &[d], Init::Ones)?,
            bias: b.tensor("bias", &[d], Init::Zeros)?,
        })
    }

    pub fn feed_forward(
        &mut self,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
        activation: Activation,
    ) -> Result<FeedForward> {
        let mut b = self.sub(name);
        Ok(FeedForward {
            hidden: b.linear("hidden", d_in, d_hidden, true)?,
            out: b.linear("out", d_hidden, d_out, true)?,
            activation,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = x.matmul(cx.p(self.weight))?;
        match self.bias {
            Some(b) => y.add_bias(cx.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(cx.p(self.gain), cx.p(self.bias), LN_EPS)
    }
}

/// Two linear maps around a pointwise activation.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.hidden.forward(cx, x)?.activation(self.activation)?;
        let h = cx.dropout(h)?;
        self.out.forward(cx, h)
    }

    /// Same as [`FeedForward::forward`] but without dropout on the hidden layer.
    pub fn forward_plain<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.hidden.forward(cx, x)?.activation(self.activation)?;
        self.out.forward(cx, h)
    }
}

#[cfg(test)]
mod tests;
