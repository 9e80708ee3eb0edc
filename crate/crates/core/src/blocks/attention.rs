use super::{BlockConfig, Ctx, FrameMask, Init, LayerNorm, Linear, ParamBuilder};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamId, Tensor, Var};

/// `[T, H*dh]` to `[H, T, dh]`.
fn split_heads<'g, T: Scalar>(x: Var<'g, T>, heads: usize) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let (t, d) = (shape[0], shape[1]);
    let dh = d / heads;
    let mut idx = Vec::with_capacity(t * d);
    for h in 0..heads {
        for i in 0..t {
            idx.extend((0..dh).map(|k| Some(i * d + h * dh + k)));
        }
    }
    x.gather(&idx, &[heads, t, dh], T::zero())
}

/// `[H, T, dh]` to `[T, H*dh]`.
fn merge_heads<'g, T: Scalar>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = x.shape();
    let (heads, t, dh) = (shape[0], shape[1], shape[2]);
    let mut idx = Vec::with_capacity(t * heads * dh);
    for i in 0..t {
        for h in 0..heads {
            idx.extend((0..dh).map(|k| Some(h * t * dh + i * dh + k)));
        }
    }
    x.gather(&idx, &[t, heads * dh], T::zero())
}

/// Sinusoidal embeddings for relative distances `T-1, T-2, ..., -(T-1)`.
pub(crate) fn relative_table<T: Scalar>(t: usize, d: usize) -> Tensor<T> {
    let n = 2 * t - 1;
    let mut data = Vec::with_capacity(n * d);
    for c in 0..n {
        let rel = t as f64 - 1.0 - c as f64;
        for k in 0..d {
            let freq = (10000f64).powf(-((k / 2 * 2) as f64) / d as f64);
            let a = rel * freq;
            data.push(T::lit(if k % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::new(&[n, d], data).expect("table shape")
}

/// Masks keys and normalizes; rejects a memory with no valid position.
fn attend<'g, T: Scalar>(scores: Var<'g, T>, keys: &FrameMask) -> Result<Var<'g, T>> {
    let shape = scores.shape();
    let tk = shape[2];
    keys.check(tk, "key")?;
    if keys.valid_count() == 0 {
        return Err(Error::contract("attention over a memory with no valid position"));
    }
    let scores = if keys.valid_count() < tk {
        let rows = shape[0] * shape[1];
        let flags: Vec<bool> = (0..rows)
            .flat_map(|_| keys.flags().iter().map(|&v| !v))
            .collect();
        scores.masked_fill(&flags, T::neg_infinity())?
    } else {
        scores
    };
    scores.softmax(2)
}

/// Pre-norm multi-head self-attention with relative positional encoding and
/// learned content/position biases, wrapped in a residual connection.
/// The key projection has no bias: softmax over keys is invariant to it.
#[derive(Debug, Clone)]
pub struct RelSelfAttention {
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub pos: Linear,
    pub pos_bias_u: ParamId,
    pub pos_bias_v: ParamId,
    heads: usize,
}

impl RelSelfAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let d = cfg.d_att;
        let mut b = b.sub(name);
        Ok(Self {
            norm: b.layer_norm("norm", d)?,
            query: b.linear("query", d, d, true)?,
            key: b.linear("key", d, d, false)?,
            value: b.linear("value", d, d, true)?,
            out: b.linear("out", d, d, true)?,
            pos: b.linear("pos", d, d, false)?,
            pos_bias_u: b.tensor("pos_bias_u", &[d], Init::Zeros)?,
            pos_bias_v: b.tensor("pos_bias_v", &[d], Init::Zeros)?,
            heads: cfg.n_heads,
        })
    }

    pub fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        mask: &FrameMask,
    ) -> Result<Var<'g, T>> {
        Ok(self.forward_with_weights(cx, x, mask)?.0)
    }

    /// Also returns the attention weights, `[H, T, T]`.
    pub fn forward_with_weights<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        mask: &FrameMask,
    ) -> Result<(Var<'g, T>, Tensor<T>)> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::shape(format!("self-attention input {shape:?}")));
        }
        let (t, d) = (shape[0], shape[1]);
        let dh = d / self.heads;
        let xn = self.norm.forward(cx, x)?;
        let q = self.query.forward(cx, xn)?;
        let k = split_heads(self.key.forward(cx, xn)?, self.heads)?;
        let v = split_heads(self.value.forward(cx, xn)?, self.heads)?;
        let qu = split_heads(q.add_bias(cx.p(self.pos_bias_u))?, self.heads)?;
        let qv = split_heads(q.add_bias(cx.p(self.pos_bias_v))?, self.heads)?;
        let table = cx.constant(relative_table(t, d));
        let p = split_heads(self.pos.forward(cx, table)?, self.heads)?;

        let content = qu.matmul(k.transpose()?)?;
        let position = qv.matmul(p.transpose()?)?;
        // Column c of the position scores holds distance T-1-c; realign so
        // that entry (i, j) reads distance i-j.
        let w = 2 * t - 1;
        let mut idx = Vec::with_capacity(self.heads * t * t);
        for h in 0..self.heads {
            for i in 0..t {
                idx.extend((0..t).map(|j| Some(h * t * w + i * w + (t - 1 - i + j))));
            }
        }
        let position = position.gather(&idx, &[self.heads, t, t], T::zero())?;
        let scores = content
            .add(position)?
            .scale(1.0 / (dh as f64).sqrt());
        let weights = attend(scores, mask)?;
        let ctx = merge_heads(weights.matmul(v)?)?;
        let y = cx.dropout(self.out.forward(cx, ctx)?)?;
        Ok((x.add(y)?, weights.value()))
    }
}

/// Pre-norm multi-head attention from a query sequence into a memory
/// sequence, wrapped in a residual connection around the query stream.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    heads: usize,
}

impl CrossAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, cfg: &BlockConfig) -> Result<Self> {
        let d = cfg.d_att;
        let mut b = b.sub(name);
        Ok(Self {
            norm: b.layer_norm("norm", d)?,
            query: b.linear("query", d, d, true)?,
            key: b.linear("key", d, d, false)?,
            value: b.linear("value", d, d, true)?,
            out: b.linear("out", d, d, true)?,
            heads: cfg.n_heads,
        })
    }

    /// `x: [L, d]` queries, `memory: [T, d]`; `memory_mask` marks valid memory rows.
    pub fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        memory: Var<'g, T>,
        memory_mask: &FrameMask,
    ) -> Result<Var<'g, T>> {
        Ok(self.forward_with_weights(cx, x, memory, memory_mask)?.0)
    }

    pub fn forward_with_weights<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, T>,
        x: Var<'g, T>,
        memory: Var<'g, T>,
        memory_mask: &FrameMask,
    ) -> Result<(Var<'g, T>, Tensor<T>)> {
        let (qs, ms) = (x.shape(), memory.shape());
        if qs.len() != 2 || ms.len() != 2 || qs[1] != ms[1] {
            return Err(Error::shape(format!("cross-attention {qs:?} into {ms:?}")));
        }
        if qs[0] == 0 {
            return Ok((x, Tensor::zeros(&[self.heads, 0, ms[0]])));
        }
        let dh = qs[1] / self.heads;
        let xn = self.norm.forward(cx, x)?;
        let q = split_heads(self.query.forward(cx, xn)?, self.heads)?;
        let k = split_heads(self.key.forward(cx, memory)?, self.heads)?;
        let v = split_heads(self.value.forward(cx, memory)?, self.heads)?;
        let scores = q.matmul(k.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
        let weights = attend(scores, memory_mask)?;
        let ctx = merge_heads(weights.matmul(v)?)?;
        let y = cx.dropout(self.out.forward(cx, ctx)?)?;
        Ok((x.add(y)?, weights.value()))
    }
}
