use super::{BlockConfig, Ctx, FeedForward, FrameMask, Init, Linear, ParamBuilder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, Var};

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

fn conv_len(t: usize) -> usize {
    (t + 2 * PAD - KERNEL) / STRIDE + 1
}

/// Output length of the frontend for `t` input frames.
pub fn subsampled_len(t: usize) -> usize {
    conv_len(conv_len(t))
}

/// Two stride-2 convolutions (kernel 3, padding 1) with ReLU, then a linear
/// map to `d_att`: the frame rate drops by a factor of four.
#[derive(Debug, Clone)]
pub struct Frontend {
    pub conv1: ParamId,
    pub conv1_bias: ParamId,
    pub conv2: ParamId,
    pub conv2_bias: ParamId,
    pub out: Linear,
}

impl Frontend {
    pub const MIN_FRAMES: usize = 4;

    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        d_feat: usize,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        let c = cfg.d_att;
        let mut b = b.sub(name);
        let fan1 = (KERNEL * d_feat) as f64;
        let fan2 = (KERNEL * c) as f64;
        Ok(Self {
            conv1: b.tensor("conv1", &[KERNEL, d_feat, c], Init::Uniform(1.0 / fan1.sqrt()))?,
            conv1_bias: b.tensor("conv1_bias", &[c], Init::Zeros)?,
            conv2: b.tensor("conv2", &[KERNEL, c, c], Init::Uniform(1.0 / fan2.sqrt()))?,
            conv2_bias: b.tensor("conv2_bias", &[c], Init::Zeros)?,
            out: b.linear("out", c, c, true)?,
        })
    }

    /// `x: [T, d_feat]` with the first `mask.valid_count()` frames real.
    /// Returns `[T', d_att]` and the subsampled mask.
    pub fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        mask: &FrameMask,
    ) -> Result<(Var<'g, T>, FrameMask)> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!("frontend input {shape:?}")));
        }
        mask.check(shape[0], "frame")?;
        let valid = mask.valid_count();
        if valid < Self::MIN_FRAMES {
            return Err(Error::contract(format!(
                "frontend needs at least {} frames, got {valid}",
                Self::MIN_FRAMES
            )));
        }
        let x = mask.zero_padded(x)?;
        let m1 = FrameMask::prefix(conv_len(shape[0]), conv_len(valid));
        let h = x
            .conv1d(cx.p(self.conv1), Some(cx.p(self.conv1_bias)), STRIDE, PAD)?
            .relu();
        let h = m1.zero_padded(h)?;
        let m2 = FrameMask::prefix(conv_len(m1.len()), conv_len(conv_len(valid)));
        let h = h
            .conv1d(cx.p(self.conv2), Some(cx.p(self.conv2_bias)), STRIDE, PAD)?
            .relu();
        let h = m2.zero_padded(h)?;
        Ok((self.out.forward(cx, h)?, m2))
    }
}

/// Mean and log-variance heads for a diagonal Gaussian, each a one-hidden-layer
/// feed-forward network.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub mean: FeedForward,
    pub logvar: FeedForward,
}

impl GaussianHead {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        d_lat: usize,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        let mut b = b.sub(name);
        Ok(Self {
            mean: b.feed_forward("mean", cfg.d_att, cfg.d_ff, d_lat, cfg.head_activation)?,
            logvar: b.feed_forward("logvar", cfg.d_att, cfg.d_ff, d_lat, cfg.head_activation)?,
        })
    }

    /// `(mu, logvar)`, each `[L, d_lat]`.
    pub fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        h: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        Ok((self.mean.forward_plain(cx, h)?, self.logvar.forward_plain(cx, h)?))
    }

    /// `[L, 2·d_lat]`: mean columns first, then log-variance.
    pub fn forward_packed<'g, T: Scalar>(&self, cx: &Ctx<'g, T>, h: Var<'g, T>) -> Result<Var<'g, T>> {
        let (mu, logvar) = self.forward(cx, h)?;
        Var::concat_last(&[mu, logvar])
    }
}
