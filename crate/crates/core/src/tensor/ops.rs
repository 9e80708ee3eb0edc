//! Differentiable operations on [`Var`].

use rand::Rng;

use super::graph::{BackwardFn, Var};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Swish,
    Tanh,
    Sigmoid,
    Relu,
    /// Gated linear unit over the last axis: `a * sigmoid(b)` for halves `a`, `b`.
    Glu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "swish" => Ok(Self::Swish),
            "tanh" => Ok(Self::Tanh),
            "sigmoid" => Ok(Self::Sigmoid),
            "relu" => Ok(Self::Relu),
            "glu" => Ok(Self::Glu),
            other => Err(Error::config("activation", format!("unknown kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Swish => "swish",
            Self::Tanh => "tanh",
            Self::Sigmoid => "sigmoid",
            Self::Relu => "relu",
            Self::Glu => "glu",
        })
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// `out[M,P] += a[M,K] * b[K,P]`
fn mm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[M,K] += g[M,P] * b[K,P]^T`
fn mm_nt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            let mut s = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            out[i * k + kk] += s;
        }
    }
}

/// `out[K,P] += a[M,K]^T * g[M,P]`
fn mm_tn_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[kk * p..(kk + 1) * p];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    fn op1(self, value: Tensor<T>, bw: BackwardFn<T>) -> Var<'g, T> {
        self.graph.push_op(value, vec![self.id], bw)
    }

    fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'g, T> {
        let value = self.graph.with_value(self.id, |x| x.map(f));
        self.op1(
            value,
            Box::new(move |g, out, ins| {
                let d = g
                    .iter()
                    .zip(ins[0].data())
                    .zip(out.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(d)]
            }),
        )
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::lit(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::lit(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| T::lit(2.0) * x)
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn swish(self) -> Var<'g, T> {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (T::one() - s)
            },
        )
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'g, T>> {
        Ok(match kind {
            Activation::Swish => self.swish(),
            Activation::Tanh => self.tanh(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::Relu => self.relu(),
            Activation::Glu => self.glu()?,
        })
    }

    /// `a * sigmoid(b)` where `a`, `b` are the halves of the last axis.
    pub fn glu(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let d = *shape.last().unwrap_or(&0);
        if d % 2 != 0 || d == 0 {
            return Err(Error::shape(format!("glu needs an even last extent, got {shape:?}")));
        }
        let h = d / 2;
        let rows = shape.iter().product::<usize>() / d;
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = h;
        let value = self.graph.with_value(self.id, |x| {
            let x = x.data();
            let mut out = Vec::with_capacity(rows * h);
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                for j in 0..h {
                    out.push(row[j] * sigmoid(row[h + j]));
                }
            }
            Tensor::new(&out_shape, out)
        })?;
        Ok(self.op1(
            value,
            Box::new(move |g, _, ins| {
                let x = ins[0].data();
                let mut dx = vec![T::zero(); x.len()];
                for r in 0..rows {
                    for j in 0..h {
                        let a = x[r * d + j];
                        let s = sigmoid(x[r * d + h + j]);
                        let gv = g[r * h + j];
                        dx[r * d + j] = gv * s;
                        dx[r * d + h + j] = gv * a * s * (T::one() - s);
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    fn binary(
        self,
        other: Var<'g, T>,
        op: &str,
        f: impl Fn(T, T) -> T,
        da: impl Fn(T, T, T) -> T + 'static,
        db: impl Fn(T, T, T) -> T + 'static,
    ) -> Result<Var<'g, T>> {
        let value = self.graph.with_values(&[self.id, other.id], |v| {
            check_same(op, v[0].shape(), v[1].shape())?;
            let data = v[0]
                .data()
                .iter()
                .zip(v[1].data())
                .map(|(&a, &b)| f(a, b))
                .collect();
            Tensor::new(v[0].shape(), data)
        })?;
        Ok(self.graph.push_op(
            value,
            vec![self.id, other.id],
            Box::new(move |g, out, ins| {
                let (a, b, y) = (ins[0].data(), ins[1].data(), out.data());
                let ga = (0..g.len()).map(|i| g[i] * da(a[i], b[i], y[i])).collect();
                let gb = (0..g.len()).map(|i| g[i] * db(a[i], b[i], y[i])).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| T::one(), |_, _, _| T::one())
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| T::one(), |_, _, _| -T::one())
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b, _| T::one() / b,
            |_, b, y| -y / b,
        )
    }

    /// Elementwise `log(exp(a) + exp(b))`; `-inf` inputs are log 0.
    pub fn log_add_exp(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let w = |x: T, y: T| {
            if y == T::neg_infinity() {
                T::zero()
            } else {
                (x - y).exp()
            }
        };
        self.binary(
            other,
            "log_add_exp",
            crate::scalar::log_add_exp,
            move |a, _, y| w(a, y),
            move |_, b, y| w(b, y),
        )
    }

    fn broadcast_last(self, v: Var<'g, T>, op: &str, mul: bool) -> Result<Var<'g, T>> {
        let value = self.graph.with_values(&[self.id, v.id], |ins| {
            let (x, b) = (ins[0], ins[1]);
            let d = x.cols();
            if b.len() != d || x.rank() == 0 {
                return Err(Error::shape(format!(
                    "{op}: cannot broadcast {:?} over {:?}",
                    b.shape(),
                    x.shape()
                )));
            }
            let data = x
                .data()
                .chunks(d)
                .flat_map(|row| {
                    row.iter()
                        .zip(b.data())
                        .map(|(&a, &c)| if mul { a * c } else { a + c })
                })
                .collect();
            Tensor::new(x.shape(), data)
        })?;
        Ok(self.graph.push_op(
            value,
            vec![self.id, v.id],
            Box::new(move |g, _, ins| {
                let (x, b) = (ins[0].data(), ins[1].data());
                let d = b.len();
                let mut db = vec![T::zero(); d];
                let dx = if mul {
                    let mut dx = vec![T::zero(); x.len()];
                    for (i, &gv) in g.iter().enumerate() {
                        dx[i] = gv * b[i % d];
                        db[i % d] += gv * x[i];
                    }
                    dx
                } else {
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % d] += gv;
                    }
                    g.to_vec()
                };
                vec![Some(dx), Some(db)]
            }),
        ))
    }

    /// `x + b` with `b` of shape `[P]` broadcast over the last axis.
    pub fn add_bias(self, b: Var<'g, T>) -> Result<Var<'g, T>> {
        self.broadcast_last(b, "add_bias", false)
    }

    /// `x * s` with `s` of shape `[P]` broadcast over the last axis.
    pub fn mul_bias(self, s: Var<'g, T>) -> Result<Var<'g, T>> {
        self.broadcast_last(s, "mul_bias", true)
    }

    /// Batched matrix product `[..., M, K] x [..., K, P]`. A 2-D right operand
    /// is shared across the batch.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (value, dims) = self.graph.with_values(&[self.id, other.id], |v| {
            let (a, b) = (v[0], v[1]);
            let (sa, sb) = (a.shape(), b.shape());
            let err = || Error::shape(format!("matmul: {sa:?} x {sb:?}"));
            if sa.len() < 2 || sb.len() < 2 {
                return Err(err());
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            let batch_a = &sa[..sa.len() - 2];
            let batch_b = &sb[..sb.len() - 2];
            let shared_b = batch_b.is_empty();
            if k != k2 || (!shared_b && batch_a != batch_b) {
                return Err(err());
            }
            let nb: usize = batch_a.iter().product();
            let mut out = vec![T::zero(); nb * m * p];
            for bi in 0..nb {
                let bo = if shared_b { 0 } else { bi * k * p };
                mm_acc(
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &b.data()[bo..bo + k * p],
                    &mut out[bi * m * p..(bi + 1) * m * p],
                    m,
                    k,
                    p,
                );
            }
            let mut shape = batch_a.to_vec();
            shape.extend([m, p]);
            Ok((Tensor::new(&shape, out)?, (nb, m, k, p, shared_b)))
        })?;
        let (nb, m, k, p, shared_b) = dims;
        Ok(self.graph.push_op(
            value,
            vec![self.id, other.id],
            Box::new(move |g, _, ins| {
                let (a, b) = (ins[0].data(), ins[1].data());
                let mut da = vec![T::zero(); a.len()];
                let mut db = vec![T::zero(); b.len()];
                for bi in 0..nb {
                    let bo = if shared_b { 0 } else { bi * k * p };
                    let gs = &g[bi * m * p..(bi + 1) * m * p];
                    mm_nt_acc(gs, &b[bo..bo + k * p], &mut da[bi * m * k..(bi + 1) * m * k], m, k, p);
                    mm_tn_acc(&a[bi * m * k..(bi + 1) * m * k], gs, &mut db[bo..bo + k * p], m, k, p);
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::shape(format!("transpose needs rank >= 2, got {shape:?}")));
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let nb = shape[..r - 2].iter().product::<usize>();
        let mut idx = Vec::with_capacity(nb * m * n);
        for b in 0..nb {
            for j in 0..n {
                for i in 0..m {
                    idx.push(Some(b * m * n + i * n + j));
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.swap(r - 2, r - 1);
        self.gather(&idx, &out_shape, T::zero())
    }

    /// `out[i] = x.flat[indices[i]]`, or `fill` where the index is `None`.
    /// Gradients scatter-add back into `x`.
    pub fn gather(self, indices: &[Option<usize>], shape: &[usize], fill: T) -> Result<Var<'g, T>> {
        let n: usize = shape.iter().product();
        if n != indices.len() {
            return Err(Error::shape(format!(
                "gather: {} indices for shape {shape:?}",
                indices.len()
            )));
        }
        let value = self.graph.with_value(self.id, |x| {
            let xd = x.data();
            let mut out = Vec::with_capacity(n);
            for ix in indices {
                match ix {
                    Some(i) if *i < xd.len() => out.push(xd[*i]),
                    Some(i) => {
                        return Err(Error::Index(format!(
                            "gather index {i} out of range for {:?}",
                            x.shape()
                        )))
                    }
                    None => out.push(fill),
                }
            }
            Tensor::new(shape, out)
        })?;
        let indices = indices.to_vec();
        Ok(self.op1(
            value,
            Box::new(move |g, _, ins| {
                let mut dx = vec![T::zero(); ins[0].len()];
                for (gv, ix) in g.iter().zip(&indices) {
                    if let Some(i) = ix {
                        dx[*i] += *gv;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 2 || start > end || end > shape[0] {
            return Err(Error::Index(format!("rows {start}..{end} of {shape:?}")));
        }
        let c = shape[1];
        let idx: Vec<_> = (start * c..end * c).map(Some).collect();
        self.gather(&idx, &[end - start, c], T::zero())
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 2 || start + len > shape[1] {
            return Err(Error::Index(format!("cols {start}+{len} of {shape:?}")));
        }
        let (r, c) = (shape[0], shape[1]);
        let idx: Vec<_> = (0..r)
            .flat_map(|i| (start..start + len).map(move |j| Some(i * c + j)))
            .collect();
        self.gather(&idx, &[r, len], T::zero())
    }

    /// Concatenates along the last axis.
    pub fn concat_last(parts: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let graph = first.graph;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let (value, widths) = graph.with_values(&ids, |vals| {
            let lead = &vals[0].shape()[..vals[0].rank() - 1];
            for v in vals {
                if &v.shape()[..v.rank() - 1] != lead {
                    return Err(Error::shape("concat: leading extents differ"));
                }
            }
            let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
            let total: usize = widths.iter().sum();
            let rows: usize = lead.iter().product();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (v, &w) in vals.iter().zip(&widths) {
                    out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            Ok((Tensor::new(&shape, out)?, widths))
        })?;
        Ok(graph.push_op(
            value,
            ids,
            Box::new(move |g, _, _| {
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut grads: Vec<Vec<T>> =
                    widths.iter().map(|&w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (gp, &w) in grads.iter_mut().zip(&widths) {
                        gp.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let value = self.graph.with_value(self.id, |x| x.clone().reshape(shape))?;
        Ok(self.op1(value, Box::new(|g, _, _| vec![Some(g.to_vec())])))
    }

    /// Positions where `mask` is true are replaced by `value` and receive no gradient.
    pub fn masked_fill(self, mask: &[bool], value: T) -> Result<Var<'g, T>> {
        let out = self.graph.with_value(self.id, |x| {
            if x.len() != mask.len() {
                return Err(Error::shape(format!(
                    "mask of length {} for shape {:?}",
                    mask.len(),
                    x.shape()
                )));
            }
            let data = x
                .data()
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { value } else { v })
                .collect();
            Tensor::new(x.shape(), data)
        })?;
        let mask = mask.to_vec();
        Ok(self.op1(
            out,
            Box::new(move |g, _, _| {
                let d = g
                    .iter()
                    .zip(&mask)
                    .map(|(&gv, &m)| if m { T::zero() } else { gv })
                    .collect();
                vec![Some(d)]
            }),
        ))
    }

    /// Copy of the value with no gradient path back.
    pub fn detach(self) -> Var<'g, T> {
        self.graph.constant(self.value())
    }

    pub fn sum(self) -> Var<'g, T> {
        let value = self.graph.with_value(self.id, |x| Tensor::scalar(x.data().iter().copied().sum()));
        self.op1(
            value,
            Box::new(|g, _, ins| vec![Some(vec![g[0]; ins[0].len()])]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.graph.with_value(self.id, Tensor::len);
        self.sum().scale(1.0 / n as f64)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let value = self.graph.with_value(self.id, |x| {
            let mut out = x.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let mut mx = T::neg_infinity();
                    for j in 0..n {
                        mx = mx.max(out[at(j)]);
                    }
                    let mut s = T::zero();
                    for j in 0..n {
                        let e = (out[at(j)] - mx).exp();
                        out[at(j)] = e;
                        s += e;
                    }
                    for j in 0..n {
                        out[at(j)] /= s;
                    }
                }
            }
            Tensor::new(&shape, out)
        })?;
        Ok(self.op1(
            value,
            Box::new(move |g, y, _| {
                let y = y.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += g[at(j)] * y[at(j)];
                        }
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let value = self.graph.with_value(self.id, |x| {
            let mut out = x.data().to_vec();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let mut mx = T::neg_infinity();
                    for j in 0..n {
                        mx = mx.max(out[at(j)]);
                    }
                    let mut s = T::zero();
                    for j in 0..n {
                        s += (out[at(j)] - mx).exp();
                    }
                    let lse = mx + s.ln();
                    for j in 0..n {
                        out[at(j)] -= lse;
                    }
                }
            }
            Tensor::new(&shape, out)
        })?;
        Ok(self.op1(
            value,
            Box::new(move |g, y, _| {
                let y = y.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let mut gs = T::zero();
                        for j in 0..n {
                            gs += g[at(j)];
                        }
                        for j in 0..n {
                            dx[at(j)] = g[at(j)] - y[at(j)].exp() * gs;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Reduces `axis` by log-sum-exp; all `-inf` slices give `-inf`.
    pub fn logsumexp(self, axis: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = self.graph.with_value(self.id, |x| {
            let x = x.data();
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * n * inner + j * inner + i;
                    let mut mx = T::neg_infinity();
                    for j in 0..n {
                        mx = mx.max(x[at(j)]);
                    }
                    if mx == T::neg_infinity() {
                        out.push(mx);
                        continue;
                    }
                    let mut s = T::zero();
                    for j in 0..n {
                        s += (x[at(j)] - mx).exp();
                    }
                    out.push(mx + s.ln());
                }
            }
            Tensor::new(&out_shape, out)
        })?;
        Ok(self.op1(
            value,
            Box::new(move |g, y, ins| {
                let (x, y) = (ins[0].data(), y.data());
                let mut dx = vec![T::zero(); x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        if y[r] == T::neg_infinity() {
                            continue;
                        }
                        for j in 0..n {
                            let at = o * n * inner + j * inner + i;
                            dx[at] = g[r] * (x[at] - y[r]).exp();
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of shape `[D]`).
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let eps = T::lit(eps);
        let stats = move |x: &[T]| {
            let d = T::from_usize_lossy(x.len());
            let mean = x.iter().copied().sum::<T>() / d;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            (mean, T::one() / (var + eps).sqrt())
        };
        let value = self.graph.with_values(&[self.id, gain.id, bias.id], |v| {
            let (x, gn, b) = (v[0], v[1], v[2]);
            let d = x.cols();
            if gn.len() != d || b.len() != d {
                return Err(Error::shape(format!(
                    "layer_norm: gain {:?} / bias {:?} for input {:?}",
                    gn.shape(),
                    b.shape(),
                    x.shape()
                )));
            }
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(d) {
                let (mean, inv) = stats(row);
                for j in 0..d {
                    out.push((row[j] - mean) * inv * gn.data()[j] + b.data()[j]);
                }
            }
            Tensor::new(x.shape(), out)
        })?;
        Ok(self.graph.push_op(
            value,
            vec![self.id, gain.id, bias.id],
            Box::new(move |g, _, ins| {
                let (x, gn) = (ins[0].data(), ins[1].data());
                let d = gn.len();
                let dn = T::from_usize_lossy(d);
                let mut dx = vec![T::zero(); x.len()];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, row) in x.chunks(d).enumerate() {
                    let (mean, inv) = stats(row);
                    let gr = &g[r * d..(r + 1) * d];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv;
                        dxhat[j] = gr[j] * gn[j];
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= dn;
                    m2 /= dn;
                    for j in 0..d {
                        dx[r * d + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![Some(dx), Some(dg), Some(db)]
            }),
        ))
    }

    /// Full 1-D convolution over time. `x: [T, C_in]`, `weight: [K, C_in, C_out]`,
    /// optional `bias: [C_out]`; zero padding on both ends.
    pub fn conv1d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g, T>> {
        self.conv_impl(weight, bias, stride, padding, false)
    }

    /// Depthwise 1-D convolution: `x: [T, C]`, `weight: [K, C]`, optional `bias: [C]`.
    pub fn depthwise_conv1d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'g, T>> {
        self.conv_impl(weight, bias, stride, padding, true)
    }

    fn conv_impl(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        padding: usize,
        depthwise: bool,
    ) -> Result<Var<'g, T>> {
        let mut ids = vec![self.id, weight.id];
        if let Some(b) = bias {
            ids.push(b.id);
        }
        let (value, dims) = self.graph.with_values(&ids, |v| {
            let (x, w) = (v[0], v[1]);
            let (xs, ws) = (x.shape(), w.shape());
            let bad = || Error::shape(format!("conv1d: input {xs:?}, kernel {ws:?}"));
            if xs.len() != 2 || stride == 0 {
                return Err(bad());
            }
            let (t, cin) = (xs[0], xs[1]);
            let (k, cout) = if depthwise {
                if ws.len() != 2 || ws[1] != cin {
                    return Err(bad());
                }
                (ws[0], cin)
            } else {
                if ws.len() != 3 || ws[1] != cin {
                    return Err(bad());
                }
                (ws[0], ws[2])
            };
            if k == 0 {
                return Err(bad());
            }
            if let Some(b) = v.get(2) {
                if b.len() != cout {
                    return Err(bad());
                }
            }
            if t + 2 * padding < k {
                return Err(Error::shape(format!(
                    "conv1d output length < 1 for T={t}, K={k}, padding={padding}"
                )));
            }
            let len = (t + 2 * padding - k) / stride + 1;
            let xd = x.data();
            let wd = w.data();
            let mut out = vec![T::zero(); len * cout];
            for o in 0..len {
                let orow = &mut out[o * cout..(o + 1) * cout];
                if let Some(b) = v.get(2) {
                    orow.copy_from_slice(b.data());
                }
                for kk in 0..k {
                    let Some(src) = (o * stride + kk).checked_sub(padding) else {
                        continue;
                    };
                    if src >= t {
                        continue;
                    }
                    let xrow = &xd[src * cin..(src + 1) * cin];
                    if depthwise {
                        let wrow = &wd[kk * cin..(kk + 1) * cin];
                        for c in 0..cin {
                            orow[c] += xrow[c] * wrow[c];
                        }
                    } else {
                        mm_acc(xrow, &wd[kk * cin * cout..(kk + 1) * cin * cout], orow, 1, cin, cout);
                    }
                }
            }
            Ok((Tensor::new(&[len, cout], out)?, (t, cin, k, cout, len)))
        })?;
        let (t, cin, k, cout, len) = dims;
        let has_bias = bias.is_some();
        Ok(self.graph.push_op(
            value,
            ids,
            Box::new(move |g, _, ins| {
                let (xd, wd) = (ins[0].data(), ins[1].data());
                let mut dx = vec![T::zero(); xd.len()];
                let mut dw = vec![T::zero(); wd.len()];
                for o in 0..len {
                    let grow = &g[o * cout..(o + 1) * cout];
                    for kk in 0..k {
                        let Some(src) = (o * stride + kk).checked_sub(padding) else {
                            continue;
                        };
                        if src >= t {
                            continue;
                        }
                        let xrow = &xd[src * cin..(src + 1) * cin];
                        if depthwise {
                            for c in 0..cin {
                                dx[src * cin + c] += grow[c] * wd[kk * cin + c];
                                dw[kk * cin + c] += grow[c] * xrow[c];
                            }
                        } else {
                            let wk = &wd[kk * cin * cout..(kk + 1) * cin * cout];
                            mm_nt_acc(grow, wk, &mut dx[src * cin..(src + 1) * cin], 1, cin, cout);
                            mm_tn_acc(xrow, grow, &mut dw[kk * cin * cout..(kk + 1) * cin * cout], 1, cin, cout);
                        }
                    }
                }
                let mut res = vec![Some(dx), Some(dw)];
                if has_bias {
                    let mut db = vec![T::zero(); cout];
                    for row in g.chunks(cout) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    res.push(Some(db));
                }
                res
            }),
        ))
    }

    /// Row gather from an embedding table `[V, D]`.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::shape(format!("embedding table must be 2-D, got {shape:?}")));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("token id {bad} outside table of {v} rows")));
        }
        let idx: Vec<_> = ids
            .iter()
            .flat_map(|&i| (i * d..(i + 1) * d).map(Some))
            .collect();
        self.gather(&idx, &[ids.len(), d], T::zero())
    }
}

/// Inverted dropout: in training, each element is kept with probability
/// `1 - rate` and scaled by `1 / (1 - rate)`; otherwise the identity.
pub fn dropout<'g, T: Scalar, R: Rng + ?Sized>(
    x: Var<'g, T>,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Var<'g, T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::contract(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let m = x.graph.constant(Tensor::new(&shape, mask)?);
    x.mul(m)
}
