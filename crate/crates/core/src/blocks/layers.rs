use super::{
    BlockConfig, CrossAttention, Ctx, FeedForward, FrameMask, Init, LayerNorm, Linear,
    ParamBuilder, RelSelfAttention,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, Var};

/// Pointwise GLU, depthwise convolution over time, normalization, swish,
/// pointwise projection; residual around the whole module.
///
/// Layer normalization stands in for batch normalization so that each
/// utterance is processed independently of its batch mates.
#[derive(Debug, Clone)]
pub struct ConvModule {
    pub norm: LayerNorm,
    pub pointwise_in: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub mid_norm: LayerNorm,
    pub pointwise_out: Linear,
    kernel: usize,
}

impl ConvModule {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let d = cfg.d_att;
        let k = cfg.conv_kernel;
        let mut b = b.sub(name);
        Ok(Self {
            norm: b.layer_norm("norm", d)?,
            pointwise_in: b.linear("pointwise_in", d, 2 * d, true)?,
            depthwise: b.tensor("depthwise", &[k, d], Init::Uniform(1.0 / (k as f64).sqrt()))?,
            depthwise_bias: b.tensor("depthwise_bias", &[d], Init::Zeros)?,
            mid_norm: b.layer_norm("mid_norm", d)?,
            pointwise_out: b.linear("pointwise_out", d, d, true)?,
            kernel: k,
        })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        mask: &FrameMask,
    ) -> Result<Var<'g, T>> {
        let h = self.norm.forward(cx, x)?;
        let h = self.pointwise_in.forward(cx, h)?.glu()?;
        // Padded frames must not leak into valid ones through the kernel.
        let h = mask.zero_padded(h)?;
        let h = h.depthwise_conv1d(
            cx.p(self.depthwise),
            Some(cx.p(self.depthwise_bias)),
            1,
            (self.kernel - 1) / 2,
        )?;
        let h = self.mid_norm.forward(cx, h)?.swish();
        let h = self.pointwise_out.forward(cx, h)?;
        x.add(cx.dropout(h)?)
    }
}

/// Macaron Conformer layer: half-step feed-forward, relative-position
/// self-attention, convolution module, half-step feed-forward, final norm.
#[derive(Debug, Clone)]
pub struct ConformerLayer {
    pub ff_in_norm: LayerNorm,
    pub ff_in: FeedForward,
    pub attention: RelSelfAttention,
    pub conv: ConvModule,
    pub ff_out_norm: LayerNorm,
    pub ff_out: FeedForward,
    pub final_norm: LayerNorm,
}

impl ConformerLayer {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let d = cfg.d_att;
        let mut b = b.sub(name);
        Ok(Self {
            ff_in_norm: b.layer_norm("ff_in_norm", d)?,
            ff_in: b.feed_forward("ff_in", d, cfg.d_ff, d, cfg.ff_activation)?,
            attention: RelSelfAttention::new(&mut b, "attention", cfg)?,
            conv: ConvModule::new(&mut b, "conv", cfg)?,
            ff_out_norm: b.layer_norm("ff_out_norm", d)?,
            ff_out: b.feed_forward("ff_out", d, cfg.d_ff, d, cfg.ff_activation)?,
            final_norm: b.layer_norm("final_norm", d)?,
        })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        mask: &FrameMask,
    ) -> Result<Var<'g, T>> {
        mask.check(x.shape()[0], "frame")?;
        let h = self.ff_in.forward(cx, self.ff_in_norm.forward(cx, x)?)?;
        let x = x.add(cx.dropout(h)?.scale(0.5))?;
        let x = self.attention.forward(cx, x, mask)?;
        let x = self.conv.forward(cx, x, mask)?;
        let h = self.ff_out.forward(cx, self.ff_out_norm.forward(cx, x)?)?;
        let x = x.add(cx.dropout(h)?.scale(0.5))?;
        self.final_norm.forward(cx, x)
    }
}

/// Transformer layer with relative-position self-attention over its own
/// sequence, cross-attention into a memory, and a feed-forward module.
#[derive(Debug, Clone)]
pub struct TransformerCaLayer {
    pub attention: RelSelfAttention,
    pub cross: CrossAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl TransformerCaLayer {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let d = cfg.d_att;
        let mut b = b.sub(name);
        Ok(Self {
            attention: RelSelfAttention::new(&mut b, "attention", cfg)?,
            cross: CrossAttention::new(&mut b, "cross", cfg)?,
            ff_norm: b.layer_norm("ff_norm", d)?,
            ff: b.feed_forward("ff", d, cfg.d_ff, d, cfg.ff_activation)?,
        })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        mask: &FrameMask,
        memory: Var<'g, T>,
        memory_mask: &FrameMask,
    ) -> Result<Var<'g, T>> {
        if x.shape()[0] == 0 {
            return Err(Error::shape("transformer layer over an empty sequence"));
        }
        let x = self.attention.forward(cx, x, mask)?;
        let x = self.cross.forward(cx, x, memory, memory_mask)?;
        let h = self.ff.forward(cx, self.ff_norm.forward(cx, x)?)?;
        x.add(cx.dropout(h)?)
    }
}

