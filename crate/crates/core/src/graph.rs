//! Reverse-mode automatic differentiation on an index-arena tape.
//!
//! Every forward op appends a [`Node`] holding its value and the indices of
//! its operands. [`Tape::backward`] walks the arena in reverse, accumulating
//! gradients. Parameters are registered by qualified name and deduplicated,
//! so a tensor used by several ops receives the sum of all its contributions.
//!
//! The op set is deliberately small: elementwise arithmetic, row broadcasts,
//! matrix products (plain and batched), 1-D convolutions, softmax, layer
//! normalisation, linear time resampling, concatenation, and full reductions.
//! Everything else in the crate is composed from these.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Boundary handling for 1-D convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// No padding; the time axis shrinks by `(kernel - 1) * dilation`.
    Valid,
    /// Edge frames are repeated so the time axis keeps its length.
    Replicate,
}

enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Square(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    /// `x [.., in] × w [in, out]`, applied to every row of `x`.
    Matmul(Var, Var),
    /// Batched `a [.., m, k] × b [.., k, n]`.
    BmmNn(Var, Var),
    /// Batched `a [.., m, k] × b [.., n, k]ᵀ`.
    BmmNt(Var, Var),
    SoftmaxLast(Var),
    LayerNorm(Var, f64),
    Conv1d { x: Var, w: Var, dilation: usize, pad: PadMode },
    DwConv1d { x: Var, w: Var, dilation: usize, pad: PadMode },
    ConcatLast(Vec<Var>),
    InterpTime(Var, usize),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grads: Vec<Option<Tensor>>,
    grads_ready: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a constant leaf. Gradients are still tracked so callers may
    /// differentiate with respect to inputs as well as parameters.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Registers a named parameter leaf. Repeated registrations under the
    /// same name return the original node, so gradient contributions from
    /// every use site accumulate into one slot.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            if self.nodes[v.0].value.shape() != value.shape() {
                return Err(Error::shape(format!(
                    "parameter '{name}' re-registered with shape {:?}, tape holds {:?}",
                    value.shape(),
                    self.nodes[v.0].value.shape()
                )));
            }
            return Ok(v);
        }
        let v = self.push(value.clone(), Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    /// Nodes the loss does not depend on get a zero gradient.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        if !self.grads_ready {
            return Err(Error::Gradient(
                "backward() has not run on this tape".to_string(),
            ));
        }
        Ok(match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape()),
        })
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "elementwise product on mismatched shapes {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let value = Tensor::new(
            self.value(a).shape(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let value = self.value(x).map(|v| v + offset);
        self.push(value, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu(x, slope))
    }

    // ---- row broadcasts ----

    fn check_row(&self, x: Var, row: Var, what: &str) -> Result<(usize, usize)> {
        let xc = self.value(x).last_dim()?;
        let r = self.value(row);
        if r.rank() != 1 || r.len() != xc {
            return Err(Error::shape(format!(
                "{what}: row shape {:?} does not match last axis of {:?}",
                r.shape(),
                self.value(x).shape()
            )));
        }
        Ok((self.value(x).leading_count()?, xc))
    }

    /// Adds a rank-1 `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (rows, c) = self.check_row(x, row, "add_row")?;
        let mut data = self.value(x).data().to_vec();
        let r = self.value(row).data();
        for i in 0..rows {
            for (d, &rv) in data[i * c..(i + 1) * c].iter_mut().zip(r) {
                *d += rv;
            }
        }
        let value = Tensor::new(self.value(x).shape(), data)?;
        Ok(self.push(value, Op::AddRow(x, row)))
    }

    /// Multiplies every row of `x` elementwise by a rank-1 `row`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (rows, c) = self.check_row(x, row, "mul_row")?;
        let mut data = self.value(x).data().to_vec();
        let r = self.value(row).data();
        for i in 0..rows {
            for (d, &rv) in data[i * c..(i + 1) * c].iter_mut().zip(r) {
                *d *= rv;
            }
        }
        let value = Tensor::new(self.value(x).shape(), data)?;
        Ok(self.push(value, Op::MulRow(x, row)))
    }

    // ---- matrix products ----

    /// Applies `w [in, out]` to the last axis of `x`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if wt.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul weight must be rank 2, got {:?}",
                wt.shape()
            )));
        }
        let (wi, wo) = (wt.shape()[0], wt.shape()[1]);
        let xi = xt.last_dim()?;
        if xi != wi {
            return Err(Error::shape(format!(
                "matmul: input last axis {xi} does not match weight rows {wi}"
            )));
        }
        let rows = xt.leading_count()?;
        let mut out = vec![0.0; rows * wo];
        mm_nn(xt.data(), wt.data(), rows, wi, wo, &mut out);
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = wo;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Matmul(x, w)))
    }

    fn bmm_dims(&self, a: Var, b: Var, transposed: bool) -> Result<(usize, usize, usize, usize)> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() < 2 || bt.rank() < 2 {
            return Err(Error::shape(format!(
                "batched matmul needs rank >= 2, got {:?} and {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let (ar, br) = (at.rank(), bt.rank());
        if at.shape()[..ar - 2] != bt.shape()[..br - 2] {
            return Err(Error::shape(format!(
                "batched matmul: leading dims of {:?} and {:?} differ",
                at.shape(),
                bt.shape()
            )));
        }
        let batch: usize = at.shape()[..ar - 2].iter().product();
        let (m, k) = (at.shape()[ar - 2], at.shape()[ar - 1]);
        let (bk, n) = if transposed {
            (bt.shape()[br - 1], bt.shape()[br - 2])
        } else {
            (bt.shape()[br - 2], bt.shape()[br - 1])
        };
        if k != bk {
            return Err(Error::shape(format!(
                "batched matmul: inner dims of {:?} and {:?} disagree",
                at.shape(),
                bt.shape()
            )));
        }
        Ok((batch, m, k, n))
    }

    /// Batched product over the last two axes: `[.., m, k] × [.., k, n]`.
    pub fn bmm_nn(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n) = self.bmm_dims(a, b, false)?;
        let (at, bt) = (self.value(a), self.value(b));
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            mm_nn(
                &at.data()[i * m * k..],
                &bt.data()[i * k * n..],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = at.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = m;
        shape[r - 1] = n;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::BmmNn(a, b)))
    }

    /// Batched product with the second operand transposed:
    /// `[.., m, k] × [.., n, k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (batch, m, k, n) = self.bmm_dims(a, b, true)?;
        let (at, bt) = (self.value(a), self.value(b));
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            mm_nt(
                &at.data()[i * m * k..],
                &bt.data()[i * n * k..],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = at.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = m;
        shape[r - 1] = n;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::BmmNt(a, b)))
    }

    // ---- normalisations ----

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.last_dim()?;
        let rows = xt.leading_count()?;
        let mut data = xt.data().to_vec();
        for i in 0..rows {
            let row = &mut data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(xt.shape(), data)?;
        Ok(self.push(value, Op::SoftmaxLast(x)))
    }

    /// Normalises each row of the last axis to zero mean and unit variance
    /// (population variance, stabilised by `eps`). Gain and shift, when
    /// needed, are composed from `mul_row` and `add_row`.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x);
        let c = xt.last_dim()?;
        let rows = xt.leading_count()?;
        let mut data = xt.data().to_vec();
        for i in 0..rows {
            let row = &mut data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let value = Tensor::new(xt.shape(), data)?;
        Ok(self.push(value, Op::LayerNorm(x, eps)))
    }

    // ---- convolutions ----

    fn conv_out_len(t_in: usize, kernel: usize, dilation: usize, pad: PadMode) -> Result<usize> {
        if kernel == 0 || dilation == 0 {
            return Err(Error::invalid(format!(
                "conv1d kernel ({kernel}) and dilation ({dilation}) must be positive"
            )));
        }
        match pad {
            PadMode::Replicate => Ok(t_in),
            PadMode::Valid => {
                let shrink = (kernel - 1) * dilation;
                if t_in <= shrink {
                    Err(Error::shape(format!(
                        "conv1d: {t_in} frames too few for kernel {kernel} dilation {dilation} \
                         without padding"
                    )))
                } else {
                    Ok(t_in - shrink)
                }
            }
        }
    }

    fn pad_left(kernel: usize, dilation: usize, pad: PadMode) -> usize {
        match pad {
            PadMode::Valid => 0,
            PadMode::Replicate => (kernel - 1) * dilation / 2,
        }
    }

    /// 1-D convolution over the second-to-last axis (time).
    /// `x` is `[.., t, c_in]`, `w` is `[c_out, c_in, k]`; the result is
    /// `[.., t_out, c_out]`. Bias, when needed, is composed via `add_row`.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize, pad: PadMode) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.rank() < 2 {
            return Err(Error::shape(format!(
                "conv1d input needs a time axis, got {:?}",
                xt.shape()
            )));
        }
        if wt.rank() != 3 {
            return Err(Error::shape(format!(
                "conv1d weight must be [out, in, k], got {:?}",
                wt.shape()
            )));
        }
        let (c_out, c_in, k) = (wt.shape()[0], wt.shape()[1], wt.shape()[2]);
        let t_in = xt.shape()[xt.rank() - 2];
        let xc = xt.last_dim()?;
        if xc != c_in {
            return Err(Error::shape(format!(
                "conv1d: input has {xc} channels, weight expects {c_in}"
            )));
        }
        let t_out = Self::conv_out_len(t_in, k, dilation, pad)?;
        let left = Self::pad_left(k, dilation, pad);
        let batch = xt.len() / (t_in * c_in);
        let wk = taps_first(wt.data(), c_out, c_in, k);
        let mut out = vec![0.0; batch * t_out * c_out];
        for b in 0..batch {
            let xb = &xt.data()[b * t_in * c_in..(b + 1) * t_in * c_in];
            let ob = &mut out[b * t_out * c_out..(b + 1) * t_out * c_out];
            for t in 0..t_out {
                let orow = &mut ob[t * c_out..(t + 1) * c_out];
                for tau in 0..k {
                    let u = clamp_index(t + tau * dilation, left, t_in);
                    let xrow = &xb[u * c_in..(u + 1) * c_in];
                    for (ci, &xv) in xrow.iter().enumerate() {
                        if xv != 0.0 {
                            let at = (tau * c_in + ci) * c_out;
                            axpy(orow, &wk[at..at + c_out], xv);
                        }
                    }
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = t_out;
        shape[r - 1] = c_out;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Conv1d { x, w, dilation, pad }))
    }

    /// Depthwise 1-D convolution: each channel is filtered independently.
    /// `x` is `[.., t, c]`, `w` is `[c, k]`.
    pub fn dw_conv1d(&mut self, x: Var, w: Var, dilation: usize, pad: PadMode) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        if xt.rank() < 2 {
            return Err(Error::shape(format!(
                "depthwise conv input needs a time axis, got {:?}",
                xt.shape()
            )));
        }
        if wt.rank() != 2 {
            return Err(Error::shape(format!(
                "depthwise conv weight must be [c, k], got {:?}",
                wt.shape()
            )));
        }
        let (c, k) = (wt.shape()[0], wt.shape()[1]);
        let t_in = xt.shape()[xt.rank() - 2];
        if xt.last_dim()? != c {
            return Err(Error::shape(format!(
                "depthwise conv: input has {} channels, weight expects {c}",
                xt.last_dim()?
            )));
        }
        let t_out = Self::conv_out_len(t_in, k, dilation, pad)?;
        let left = Self::pad_left(k, dilation, pad);
        let batch = xt.len() / (t_in * c);
        let wk = taps_first(wt.data(), c, 1, k);
        let mut out = vec![0.0; batch * t_out * c];
        for b in 0..batch {
            let xb = &xt.data()[b * t_in * c..(b + 1) * t_in * c];
            let ob = &mut out[b * t_out * c..(b + 1) * t_out * c];
            for t in 0..t_out {
                for tau in 0..k {
                    let u = clamp_index(t + tau * dilation, left, t_in);
                    let xrow = &xb[u * c..(u + 1) * c];
                    let orow = &mut ob[t * c..(t + 1) * c];
                    let wrow = &wk[tau * c..(tau + 1) * c];
                    for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = t_out;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::DwConv1d { x, w, dilation, pad }))
    }

    // ---- structure ----

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_last needs at least one operand"));
        }
        let lead = self.value(parts[0]).shape();
        let lead = &lead[..lead.len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.is_empty() || &s[..s.len() - 1] != lead.as_slice() {
                return Err(Error::shape(format!(
                    "concat_last: operand shape {:?} does not share leading dims {:?}",
                    s, lead
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead.clone();
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::ConcatLast(parts.to_vec())))
    }

    /// Linearly resamples the time axis (second-to-last) to `target_len`,
    /// preserving the first and last frames. A no-op copy when the lengths
    /// already agree.
    pub fn interp_time(&mut self, x: Var, target_len: usize) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() < 2 {
            return Err(Error::shape(format!(
                "interp_time input needs a time axis, got {:?}",
                xt.shape()
            )));
        }
        if target_len == 0 {
            return Err(Error::invalid("interp_time target length must be positive"));
        }
        let t_in = xt.shape()[xt.rank() - 2];
        if t_in == 0 {
            return Err(Error::shape("interp_time input has zero frames".to_string()));
        }
        let c = xt.last_dim()?;
        let batch = xt.len() / (t_in * c);
        let mut out = vec![0.0; batch * target_len * c];
        for b in 0..batch {
            let xb = &xt.data()[b * t_in * c..(b + 1) * t_in * c];
            let ob = &mut out[b * target_len * c..(b + 1) * target_len * c];
            if target_len == t_in {
                ob.copy_from_slice(xb);
                continue;
            }
            for i in 0..target_len {
                let (lo, hi, w) = interp_coords(t_in, target_len, i);
                let (xl, xh) = (&xb[lo * c..(lo + 1) * c], &xb[hi * c..(hi + 1) * c]);
                let orow = &mut ob[i * c..(i + 1) * c];
                for ((o, &a), &bv) in orow.iter_mut().zip(xl).zip(xh) {
                    *o = (1.0 - w) * a + w * bv;
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = target_len;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::InterpTime(x, target_len)))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s / n), Op::MeanAll(x))
    }

    /// Mean of squared elements: the workhorse reduction for every loss here.
    pub fn mean_sq(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        self.mean_all(sq)
    }

    // ---- reverse pass ----

    /// Accumulates d`loss`/d`node` for every node on the tape. `loss` must be
    /// a scalar. May be called again after adding more nodes; gradients are
    /// recomputed from scratch.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward target must be a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut pending: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        pending[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            self.propagate(i, &g, &mut pending);
            pending[i] = Some(g);
        }

        self.grads = pending
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(self.nodes[i].value.shape(), g).unwrap()))
            .collect();
        self.grads_ready = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        fn acc<'a>(pending: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
            pending[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let vlen = |v: Var| self.nodes[v.0].value.len();

        match &self.nodes[i].op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                axpy(acc(pending, *a, vlen(*a)), g, 1.0);
                axpy(acc(pending, *b, vlen(*b)), g, 1.0);
            }
            Op::Sub(a, b) => {
                axpy(acc(pending, *a, vlen(*a)), g, 1.0);
                axpy(acc(pending, *b, vlen(*b)), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let ga = acc(pending, *a, vlen(*a));
                for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(vb) {
                    *d += gv * bv;
                }
                let gb = acc(pending, *b, vlen(*b));
                for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(va) {
                    *d += gv * av;
                }
            }
            Op::Scale(x, f) => axpy(acc(pending, *x, vlen(*x)), g, *f),
            Op::AddScalar(x) => axpy(acc(pending, *x, vlen(*x)), g, 1.0),
            Op::AddRow(x, row) => {
                axpy(acc(pending, *x, vlen(*x)), g, 1.0);
                let c = vlen(*row);
                let gr = acc(pending, *row, c);
                for chunk in g.chunks_exact(c) {
                    for (d, &gv) in gr.iter_mut().zip(chunk) {
                        *d += gv;
                    }
                }
            }
            Op::MulRow(x, row) => {
                let c = vlen(*row);
                let vr = self.nodes[row.0].value.data().to_vec();
                let vx = self.nodes[x.0].value.data();
                let gx = acc(pending, *x, vlen(*x));
                for (chunk, gc) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                    for ((d, &gv), &rv) in chunk.iter_mut().zip(gc).zip(&vr) {
                        *d += gv * rv;
                    }
                }
                let gr = acc(pending, *row, c);
                for (chunk, gc) in vx.chunks_exact(c).zip(g.chunks_exact(c)) {
                    for ((d, &xv), &gv) in gr.iter_mut().zip(chunk).zip(gc) {
                        *d += gv * xv;
                    }
                }
            }
            Op::Square(x) => {
                let vx = self.nodes[x.0].value.data();
                let gx = acc(pending, *x, vlen(*x));
                for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                    *d += 2.0 * xv * gv;
                }
            }
            Op::Tanh(x) => {
                let vy = self.nodes[i].value.data();
                let gx = acc(pending, *x, vlen(*x));
                for ((d, &gv), &yv) in gx.iter_mut().zip(g).zip(vy) {
                    *d += gv * (1.0 - yv * yv);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let vx = self.nodes[x.0].value.data();
                let gx = acc(pending, *x, vlen(*x));
                for ((d, &gv), &xv) in gx.iter_mut().zip(g).zip(vx) {
                    *d += gv * if xv >= 0.0 { 1.0 } else { *slope };
                }
            }
            Op::Matmul(x, w) => {
                let (xt, wt) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (wi, wo) = (wt.shape()[0], wt.shape()[1]);
                let rows = xt.len() / wi;
                let wt_data = wt.data().to_vec();
                let xt_data = xt.data().to_vec();
                mm_nt(g, &wt_data, rows, wo, wi, acc(pending, *x, vlen(*x)));
                mm_tn(&xt_data, g, rows, wi, wo, acc(pending, *w, vlen(*w)));
            }
            Op::BmmNn(a, b) => {
                let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ra = at.rank();
                let (m, k) = (at.shape()[ra - 2], at.shape()[ra - 1]);
                let n = bt.shape()[bt.rank() - 1];
                let batch = at.len() / (m * k);
                let (ad, bd) = (at.data().to_vec(), bt.data().to_vec());
                {
                    let ga = acc(pending, *a, vlen(*a));
                    for ib in 0..batch {
                        mm_nt(
                            &g[ib * m * n..],
                            &bd[ib * k * n..],
                            m,
                            n,
                            k,
                            &mut ga[ib * m * k..(ib + 1) * m * k],
                        );
                    }
                }
                let gb = acc(pending, *b, vlen(*b));
                for ib in 0..batch {
                    mm_tn(
                        &ad[ib * m * k..(ib + 1) * m * k],
                        &g[ib * m * n..(ib + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut gb[ib * k * n..(ib + 1) * k * n],
                    );
                }
            }
            Op::BmmNt(a, b) => {
                let (at, bt) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ra = at.rank();
                let (m, k) = (at.shape()[ra - 2], at.shape()[ra - 1]);
                let n = bt.shape()[bt.rank() - 2];
                let batch = at.len() / (m * k);
                let (ad, bd) = (at.data().to_vec(), bt.data().to_vec());
                {
                    let ga = acc(pending, *a, vlen(*a));
                    for ib in 0..batch {
                        mm_nn(
                            &g[ib * m * n..],
                            &bd[ib * n * k..],
                            m,
                            n,
                            k,
                            &mut ga[ib * m * k..(ib + 1) * m * k],
                        );
                    }
                }
                let gb = acc(pending, *b, vlen(*b));
                for ib in 0..batch {
                    mm_tn(
                        &g[ib * m * n..(ib + 1) * m * n],
                        &ad[ib * m * k..(ib + 1) * m * k],
                        m,
                        n,
                        k,
                        &mut gb[ib * n * k..(ib + 1) * n * k],
                    );
                }
            }
            Op::SoftmaxLast(x) => {
                let vy = self.nodes[i].value.data();
                let c = *self.nodes[i].value.shape().last().unwrap();
                let gx = acc(pending, *x, vlen(*x));
                for ((gout, grow), yrow) in
                    gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(vy.chunks_exact(c))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &gv), &yv) in gout.iter_mut().zip(grow).zip(yrow) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm(x, eps) => {
                let vx = self.nodes[x.0].value.data();
                let vy = self.nodes[i].value.data();
                let c = *self.nodes[i].value.shape().last().unwrap();
                let gx = acc(pending, *x, vlen(*x));
                for (((gout, grow), yrow), xrow) in gx
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(vy.chunks_exact(c))
                    .zip(vx.chunks_exact(c))
                {
                    let mean = xrow.iter().sum::<f64>() / c as f64;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = grow.iter().sum::<f64>() / c as f64;
                    let gydot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<f64>() / c as f64;
                    for ((d, &gv), &yv) in gout.iter_mut().zip(grow).zip(yrow) {
                        *d += (gv - gmean - yv * gydot) * inv;
                    }
                }
            }
            Op::Conv1d { x, w, dilation, pad } => {
                let (xt, wt) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (c_out, c_in, k) = (wt.shape()[0], wt.shape()[1], wt.shape()[2]);
                let t_in = xt.shape()[xt.rank() - 2];
                let t_out = self.nodes[i].value.shape()[xt.rank() - 2];
                let left = Self::pad_left(k, *dilation, *pad);
                let batch = xt.len() / (t_in * c_in);
                let (xd, wd) = (xt.data().to_vec(), wt.data().to_vec());
                let wk = taps_first(&wd, c_out, c_in, k);
                {
                    let gx = acc(pending, *x, vlen(*x));
                    for b in 0..batch {
                        let gb = &g[b * t_out * c_out..(b + 1) * t_out * c_out];
                        let gxb = &mut gx[b * t_in * c_in..(b + 1) * t_in * c_in];
                        for t in 0..t_out {
                            let grow = &gb[t * c_out..(t + 1) * c_out];
                            for tau in 0..k {
                                let u = clamp_index(t + tau * dilation, left, t_in);
                                let xrow = &mut gxb[u * c_in..(u + 1) * c_in];
                                for (ci, d) in xrow.iter_mut().enumerate() {
                                    let at = (tau * c_in + ci) * c_out;
                                    *d += dot(grow, &wk[at..at + c_out]);
                                }
                            }
                        }
                    }
                }
                // Weight gradients gather in tap-major order and scatter back
                // once, keeping the accumulation loop contiguous.
                let mut gwk = vec![0.0; k * c_in * c_out];
                for b in 0..batch {
                    let gb = &g[b * t_out * c_out..(b + 1) * t_out * c_out];
                    let xb = &xd[b * t_in * c_in..(b + 1) * t_in * c_in];
                    for t in 0..t_out {
                        let grow = &gb[t * c_out..(t + 1) * c_out];
                        for tau in 0..k {
                            let u = clamp_index(t + tau * dilation, left, t_in);
                            let xrow = &xb[u * c_in..(u + 1) * c_in];
                            for (ci, &xv) in xrow.iter().enumerate() {
                                if xv != 0.0 {
                                    let at = (tau * c_in + ci) * c_out;
                                    axpy(&mut gwk[at..at + c_out], grow, xv);
                                }
                            }
                        }
                    }
                }
                let gw = acc(pending, *w, vlen(*w));
                for co in 0..c_out {
                    for ci in 0..c_in {
                        for tau in 0..k {
                            gw[(co * c_in + ci) * k + tau] += gwk[(tau * c_in + ci) * c_out + co];
                        }
                    }
                }
            }
            Op::DwConv1d { x, w, dilation, pad } => {
                let (xt, wt) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (c, k) = (wt.shape()[0], wt.shape()[1]);
                let t_in = xt.shape()[xt.rank() - 2];
                let t_out = self.nodes[i].value.shape()[xt.rank() - 2];
                let left = Self::pad_left(k, *dilation, *pad);
                let batch = xt.len() / (t_in * c);
                let (xd, wd) = (xt.data().to_vec(), wt.data().to_vec());
                let wk = taps_first(&wd, c, 1, k);
                {
                    let gx = acc(pending, *x, vlen(*x));
                    for b in 0..batch {
                        let gb = &g[b * t_out * c..(b + 1) * t_out * c];
                        let gxb = &mut gx[b * t_in * c..(b + 1) * t_in * c];
                        for t in 0..t_out {
                            let grow = &gb[t * c..(t + 1) * c];
                            for tau in 0..k {
                                let u = clamp_index(t + tau * dilation, left, t_in);
                                let xrow = &mut gxb[u * c..(u + 1) * c];
                                let wrow = &wk[tau * c..(tau + 1) * c];
                                for ((d, &gv), &wv) in xrow.iter_mut().zip(grow).zip(wrow) {
                                    *d += gv * wv;
                                }
                            }
                        }
                    }
                }
                let mut gwk = vec![0.0; k * c];
                for b in 0..batch {
                    let gb = &g[b * t_out * c..(b + 1) * t_out * c];
                    let xb = &xd[b * t_in * c..(b + 1) * t_in * c];
                    for t in 0..t_out {
                        let grow = &gb[t * c..(t + 1) * c];
                        for tau in 0..k {
                            let u = clamp_index(t + tau * dilation, left, t_in);
                            let xrow = &xb[u * c..(u + 1) * c];
                            let gwrow = &mut gwk[tau * c..(tau + 1) * c];
                            for ((o, &gv), &xv) in gwrow.iter_mut().zip(grow).zip(xrow) {
                                *o += gv * xv;
                            }
                        }
                    }
                }
                let gw = acc(pending, *w, vlen(*w));
                for ch in 0..c {
                    for tau in 0..k {
                        gw[ch * k + tau] += gwk[tau * c + ch];
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let total = *self.nodes[i].value.shape().last().unwrap();
                let rows = self.nodes[i].value.len() / total;
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| *self.nodes[p.0].value.shape().last().unwrap())
                    .collect();
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let gp = acc(pending, p, vlen(p));
                    for r in 0..rows {
                        for j in 0..w {
                            gp[r * w + j] += g[r * total + off + j];
                        }
                    }
                    off += w;
                }
            }
            Op::InterpTime(x, target_len) => {
                let xt = &self.nodes[x.0].value;
                let t_in = xt.shape()[xt.rank() - 2];
                let c = *xt.shape().last().unwrap();
                let batch = xt.len() / (t_in * c);
                let gx = acc(pending, *x, vlen(*x));
                for b in 0..batch {
                    let gb = &g[b * target_len * c..(b + 1) * target_len * c];
                    let gxb = &mut gx[b * t_in * c..(b + 1) * t_in * c];
                    if *target_len == t_in {
                        axpy(gxb, gb, 1.0);
                        continue;
                    }
                    for i2 in 0..*target_len {
                        let (lo, hi, w) = interp_coords(t_in, *target_len, i2);
                        for ch in 0..c {
                            let gv = gb[i2 * c + ch];
                            gxb[lo * c + ch] += (1.0 - w) * gv;
                            gxb[hi * c + ch] += w * gv;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let gx = acc(pending, *x, vlen(*x));
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
            Op::MeanAll(x) => {
                let n = vlen(*x) as f64;
                let gx = acc(pending, *x, vlen(*x));
                for d in gx.iter_mut() {
                    *d += g[0] / n;
                }
            }
        }
    }
}

/// `dst += factor * src`
fn axpy(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Reorders `[c_out, c_in, k]` conv weights to `[k, c_in, c_out]` so the
/// hot loops walk contiguous per-tap slices instead of striding by `k`.
fn taps_first(w: &[f64], c_out: usize, c_in: usize, k: usize) -> Vec<f64> {
    let mut wk = vec![0.0; w.len()];
    for co in 0..c_out {
        for ci in 0..c_in {
            for tau in 0..k {
                wk[(tau * c_in + ci) * c_out + co] = w[(co * c_in + ci) * k + tau];
            }
        }
    }
    wk
}

fn clamp_index(pos: usize, pad_left: usize, t_in: usize) -> usize {
    (pos as isize - pad_left as isize).clamp(0, t_in as isize - 1) as usize
}

/// `(lo, hi, weight)` for resampling index `i`; `weight` applies to `hi`.
/// Exact grid hits (the endpoints in particular) snap to a single source
/// row with weight 0, so those frames copy bitwise instead of passing
/// through `a + w·(b − a)`.
pub(crate) fn interp_coords(t_in: usize, t_out: usize, i: usize) -> (usize, usize, f64) {
    if t_in == 1 || t_out == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (t_in - 1) as f64 / (t_out - 1) as f64;
    let lo = (pos.floor() as usize).min(t_in - 2);
    let w = pos - lo as f64;
    if w == 0.0 {
        (lo, lo, 0.0)
    } else if w == 1.0 {
        (lo + 1, lo + 1, 0.0)
    } else {
        (lo, lo + 1, w)
    }
}

/// `out[m, n] += a[m, k] · b[k, n]`
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// `out[m, n] += a[m, k] · b[n, k]ᵀ`
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (o, j) in orow.iter_mut().zip(0..n) {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// `out[k, n] += a[m, k]ᵀ · b[m, n]`
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}
