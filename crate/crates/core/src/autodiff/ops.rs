//! Differentiable operations: forward evaluation on [`Graph`] and the
//! matching vector-Jacobian products.

use super::kernels::{self, Conv2dGeom, TConvGeom};
use super::{Graph, Node, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Border handling for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output shrinks by `k - 1`.
    Valid,
    /// Zero padding that preserves the extent.
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Mean,
    Max,
}

/// Log-probabilities are clamped at this floor in the cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

pub(crate) enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Sum(Var),
    BiasAdd { x: Var, b: Var, inner: usize },
    ChannelMul { x: Var, v: Var, inner: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, geom: Conv2dGeom },
    TemporalConv { x: Var, k: Var, geom: TConvGeom },
    /// Max pooling of any kind: each output copies one input element.
    MaxGather { x: Var, argmax: Vec<usize> },
    TemporalMean { x: Var, frames: usize, features: usize },
    LeakyRelu { x: Var, alpha: F },
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    CrossEntropy { p: Var, labels: Vec<usize> },
    Reshape(Var),
    SliceLast { x: Var, start: usize },
    SelectTime { x: Var, t: usize },
    StackTime(Vec<Var>),
    Dropout { x: Var, mask: Vec<F> },
}

impl<F> Op<F> {
    pub fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale(x, _) | Sum(x) | Sigmoid(x) | Tanh(x) | Softmax(x) | Reshape(x) => vec![*x],
            BiasAdd { x, b, .. } => vec![*x, *b],
            ChannelMul { x, v, .. } => vec![*x, *v],
            Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Conv2d { x, k, .. } | TemporalConv { x, k, .. } => vec![*x, *k],
            MaxGather { x, .. }
            | TemporalMean { x, .. }
            | LeakyRelu { x, .. }
            | SliceLast { x, .. }
            | SelectTime { x, .. }
            | Dropout { x, .. } => vec![*x],
            CrossEntropy { p, .. } => vec![*p],
            StackTime(vs) => vs.clone(),
        }
    }
}

fn hash_indices(seed: u64, idx: &[usize]) -> u64 {
    idx.iter().fold(seed, |h, &i| (h ^ i as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl<F: Scalar> Graph<F> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::from_vec(av.shape(), data).expect("same shape");
        self.push(t, op, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), false)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), false)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, F::one() / F::lit(n as f64))
    }

    fn broadcast_geom(&self, op: &'static str, x: Var, v: Var, axis: usize) -> Result<usize> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if axis >= xs.len() || vs.len() != 1 || vs[0] != xs[axis] {
            return Err(Error::shape(op, xs, vs));
        }
        Ok(xs[axis + 1..].iter().product())
    }

    /// Adds a per-channel vector `b` along `axis` of `x`.
    pub fn bias_add(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let inner = self.broadcast_geom("bias_add", x, b, axis)?;
        let bv = self.value(b).data();
        let c = bv.len();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = *v + bv[(i / inner) % c];
        }
        Ok(self.push(t, Op::BiasAdd { x, b, inner }, false))
    }

    /// Multiplies `x` by a per-channel vector along `axis` (diagonal weights).
    pub fn channel_mul(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let inner = self.broadcast_geom("channel_mul", x, v, axis)?;
        let vv = self.value(v).data();
        let c = vv.len();
        let mut t = self.value(x).clone();
        for (i, e) in t.data_mut().iter_mut().enumerate() {
            *e = *e * vv[(i / inner) % c];
        }
        Ok(self.push(t, Op::ChannelMul { x, v, inner }, false))
    }

    /// `x W^T + b` over the last axis of `x`; `w` is `[m, n]`, `b` is `[m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[1] {
            return Err(Error::shape("affine", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape("affine", &ws, self.shape(b)));
            }
        }
        let (m, n) = (ws[0], ws[1]);
        let rows = self.value(x).len() / n.max(1);
        let mut out = vec![F::zero(); rows * m];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                out[r * m..(r + 1) * m].copy_from_slice(bv);
            }
        }
        gemm(
            F::one(),
            self.value(x).data(),
            MatRef::row_major(0, rows, n),
            self.value(w).data(),
            MatRef::row_major(0, m, n).t(),
            if b.is_some() { F::one() } else { F::zero() },
            &mut out,
            MatRef::row_major(0, rows, m),
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, false))
    }

    /// 2-D cross-correlation (no kernel flip, no bias) over the trailing
    /// `[C, H, W]` axes; leading axes are batch. Kernels are `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, k: Var, padding: Padding) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let r = xs.len();
        if r < 3 || ks.len() != 4 || ks[2] != ks[3] || ks[1] != xs[r - 3] || ks[2] == 0 {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        let (c_in, h, w) = (xs[r - 3], xs[r - 2], xs[r - 1]);
        let ksz = ks[2];
        let pad = match padding {
            Padding::Same => {
                if ksz % 2 == 0 {
                    return Err(Error::usage(format!(
                        "conv2d: same padding needs an odd kernel, got {ksz}x{ksz}"
                    )));
                }
                (ksz - 1) / 2
            }
            Padding::Valid => {
                if ksz > h || ksz > w {
                    return Err(Error::shape("conv2d", &xs, &ks));
                }
                0
            }
        };
        let geom = Conv2dGeom {
            batch: xs[..r - 3].iter().product(),
            c_in,
            h,
            w,
            c_out: ks[0],
            k: ksz,
            pad,
            ho: h + 2 * pad - ksz + 1,
            wo: w + 2 * pad - ksz + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(k).data());
        let mut shape = xs[..r - 3].to_vec();
        shape.extend([geom.c_out, geom.ho, geom.wo]);
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, Op::Conv2d { x, k, geom }, false))
    }

    /// 1-D cross-correlation along time, applied independently at every
    /// spatial position. `x` is `[T, M]`, `[B, T, M]`, `[B, T, M, P]` or
    /// `[B, T, M, H, W]`; kernels are `[K, M, L]`. No bias, no activation.
    pub fn temporal_conv(&mut self, x: Var, k: Var, padding: Padding) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let (batch, t_in, m, pos) = match xs.len() {
            2 => (1, xs[0], xs[1], 1),
            3 => (xs[0], xs[1], xs[2], 1),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            5 => (xs[0], xs[1], xs[2], xs[3] * xs[4]),
            _ => return Err(Error::shape("temporal_conv", &xs, &ks)),
        };
        if ks.len() != 3 || ks[1] != m || ks[2] == 0 {
            return Err(Error::shape("temporal_conv", &xs, &ks));
        }
        let len = ks[2];
        let (pad_left, t_out) = match padding {
            Padding::Same => ((len - 1) / 2, t_in),
            Padding::Valid => {
                if len > t_in {
                    return Err(Error::shape("temporal_conv", &xs, &ks));
                }
                (0, t_in - len + 1)
            }
        };
        let geom = TConvGeom {
            batch,
            t_in,
            m,
            pos,
            k_out: ks[0],
            len,
            pad_left,
            t_out,
        };
        let out = kernels::tconv_forward(&geom, self.value(x).data(), self.value(k).data());
        let mut shape = xs.clone();
        let t_axis = if xs.len() == 2 { 0 } else { 1 };
        shape[t_axis] = t_out;
        shape[t_axis + 1] = ks[0];
        let t = Tensor::from_vec(&shape, out)?;
        Ok(self.push(t, Op::TemporalConv { x, k, geom }, false))
    }

    fn max_gather(&mut self, x: Var, shape: Vec<usize>, argmax: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).data();
        let data = argmax.iter().map(|&i| xv[i]).collect();
        let t = Tensor::from_vec(&shape, data)?;
        let h = hash_indices(self.kinks, &argmax);
        self.note_kink(h);
        Ok(self.push(t, Op::MaxGather { x, argmax }, false))
    }

    /// Non-overlapping 2x2 max pooling over the trailing `[H, W]` axes.
    /// Odd extents keep a final partial block (ceil mode). Ties go to the
    /// first element in row-major order.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let r = xs.len();
        if r < 2 || xs[r - 1] == 0 || xs[r - 2] == 0 {
            return Err(Error::shape("max_pool2d", &xs, &[2, 2]));
        }
        let (h, w) = (xs[r - 2], xs[r - 1]);
        let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
        let planes: usize = xs[..r - 2].iter().product();
        let xv = self.value(x).data();
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = base + 2 * oi * w + 2 * oj;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let (i, j) = (2 * oi + di, 2 * oj + dj);
                            if i < h && j < w {
                                let idx = base + i * w + j;
                                if xv[idx] > xv[best] {
                                    best = idx;
                                }
                            }
                        }
                    }
                    argmax.push(best);
                }
            }
        }
        let mut shape = xs[..r - 2].to_vec();
        shape.extend([ho, wo]);
        self.max_gather(x, shape, argmax)
    }

    /// Non-overlapping 2x2x2 max pooling over `[T, C, H, W]` (time, height,
    /// width; channels untouched). Leading axes are batch. Ties go to the
    /// first element in time-major, then row-major order.
    pub fn max_pool3d(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let r = xs.len();
        if r < 4 || xs[r - 4] == 0 || xs[r - 2] == 0 || xs[r - 1] == 0 {
            return Err(Error::shape("max_pool3d", &xs, &[2, 2, 2]));
        }
        let (t, c, h, w) = (xs[r - 4], xs[r - 3], xs[r - 2], xs[r - 1]);
        let (to, ho, wo) = (t.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
        let batch: usize = xs[..r - 4].iter().product();
        let xv = self.value(x).data();
        let idx = |b: usize, tt: usize, cc: usize, i: usize, j: usize| (((b * t + tt) * c + cc) * h + i) * w + j;
        let mut argmax = Vec::with_capacity(batch * to * c * ho * wo);
        for b in 0..batch {
            for ot in 0..to {
                for cc in 0..c {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            let mut best = idx(b, 2 * ot, cc, 2 * oi, 2 * oj);
                            for dt in 0..2 {
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        let (tt, i, j) = (2 * ot + dt, 2 * oi + di, 2 * oj + dj);
                                        if tt < t && i < h && j < w {
                                            let k = idx(b, tt, cc, i, j);
                                            if xv[k] > xv[best] {
                                                best = k;
                                            }
                                        }
                                    }
                                }
                            }
                            argmax.push(best);
                        }
                    }
                }
            }
        }
        let mut shape = xs[..r - 4].to_vec();
        shape.extend([to, c, ho, wo]);
        self.max_gather(x, shape, argmax)
    }

    /// Reduces `[B, T, F]` (or `[T, F]`) across time.
    pub fn temporal_pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, frames, feat, out_shape) = match xs.len() {
            2 => (1, xs[0], xs[1], vec![xs[1]]),
            3 => (xs[0], xs[1], xs[2], vec![xs[0], xs[2]]),
            _ => return Err(Error::shape("temporal_pool", &xs, &[])),
        };
        if frames == 0 {
            return Err(Error::usage("temporal_pool over zero frames"));
        }
        let xv = self.value(x).data();
        match mode {
            PoolMode::Max => {
                let mut argmax = Vec::with_capacity(batch * feat);
                for b in 0..batch {
                    for f in 0..feat {
                        let mut best = b * frames * feat + f;
                        for t in 1..frames {
                            let k = (b * frames + t) * feat + f;
                            if xv[k] > xv[best] {
                                best = k;
                            }
                        }
                        argmax.push(best);
                    }
                }
                self.max_gather(x, out_shape, argmax)
            }
            PoolMode::Mean => {
                let scale = F::one() / F::lit(frames as f64);
                let mut out = vec![F::zero(); batch * feat];
                for b in 0..batch {
                    for t in 0..frames {
                        for f in 0..feat {
                            out[b * feat + f] = out[b * feat + f] + xv[(b * frames + t) * feat + f];
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v = *v * scale);
                let t = Tensor::from_vec(&out_shape, out)?;
                Ok(self.push(t, Op::TemporalMean { x, frames, features: feat }, false))
            }
        }
    }

    /// `max(alpha x, x)` elementwise.
    pub fn leaky_relu(&mut self, x: Var, alpha: F) -> Var {
        let xv = self.value(x);
        let mut bits = 0u64;
        let mut h = self.kinks;
        for (i, &v) in xv.data().iter().enumerate() {
            bits = (bits << 1) | u64::from(v > F::zero());
            if i % 64 == 63 {
                h = (h ^ bits).wrapping_mul(0x0000_0100_0000_01b3);
                bits = 0;
            }
        }
        h = (h ^ bits).wrapping_mul(0x0000_0100_0000_01b3);
        let t = xv.map(|v| if v > F::zero() { v } else { v * alpha });
        self.note_kink(h);
        self.push(t, Op::LeakyRelu { x, alpha }, false)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| {
            if v >= F::zero() {
                F::one() / (F::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (F::one() + e)
            }
        });
        self.push(t, Op::Sigmoid(x), false)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        self.push(t, Op::Tanh(x), false)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let k = *xv.shape().last().ok_or_else(|| Error::usage("softmax of a scalar"))?;
        if k == 0 {
            return Err(Error::usage("softmax over an empty axis"));
        }
        let mut t = xv.clone();
        for row in t.data_mut().chunks_mut(k) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        Ok(self.push(t, Op::Softmax(x), false))
    }

    /// Mean over rows of `-ln max(p[row, label], 1e-12)`; `p` holds one
    /// distribution per row along its last axis.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let pv = self.value(p);
        let k = *pv.shape().last().ok_or_else(|| Error::usage("cross_entropy of a scalar"))?;
        let rows = pv.len() / k.max(1);
        if rows != labels.len() {
            return Err(Error::shape("cross_entropy", pv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::usage(format!("label {bad} out of range for {k} classes")));
        }
        if rows == 0 {
            return Err(Error::usage("cross_entropy over zero rows"));
        }
        let clamp = F::lit(LOG_CLAMP);
        let mut total = F::zero();
        let mut clamped = Vec::new();
        for (r, &l) in labels.iter().enumerate() {
            let v = pv.data()[r * k + l];
            if v <= clamp {
                clamped.push(r);
            }
            total = total - v.max(clamp).ln();
        }
        let t = Tensor::scalar(total / F::lit(rows as f64));
        let h = hash_indices(self.kinks, &clamped);
        self.note_kink(h);
        Ok(self.push(t, Op::CrossEntropy { p, labels: labels.to_vec() }, false))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), false))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::usage("slice of a scalar"))?;
        if start + len > d {
            return Err(Error::shape("slice_last", &xs, &[start, len]));
        }
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = xs;
        *shape.last_mut().unwrap() = len;
        let t = Tensor::from_vec(&shape, data)?;
        Ok(self.push(t, Op::SliceLast { x, start }, false))
    }

    /// Frame `t` of a `[B, T, D]` sequence, as `[B, D]`.
    pub fn select_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || t >= xs[1] {
            return Err(Error::shape("select_time", &xs, &[t]));
        }
        let (b, tt, d) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            data.extend_from_slice(&xv[(bi * tt + t) * d..(bi * tt + t + 1) * d]);
        }
        let out = Tensor::from_vec(&[b, d], data)?;
        Ok(self.push(out, Op::SelectTime { x, t }, false))
    }

    /// Stacks `[B, D]` frames into `[B, T, D]`.
    pub fn stack_time(&mut self, frames: &[Var]) -> Result<Var> {
        let first = *frames.first().ok_or_else(|| Error::usage("stack_time of zero frames"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 {
            return Err(Error::shape("stack_time", &s0, &[]));
        }
        for &f in frames {
            if self.shape(f) != s0.as_slice() {
                return Err(Error::shape("stack_time", &s0, self.shape(f)));
            }
        }
        let (b, d, tt) = (s0[0], s0[1], frames.len());
        let mut data = vec![F::zero(); b * tt * d];
        for (t, &f) in frames.iter().enumerate() {
            let fv = self.value(f).data();
            for bi in 0..b {
                data[(bi * tt + t) * d..(bi * tt + t + 1) * d].copy_from_slice(&fv[bi * d..(bi + 1) * d]);
            }
        }
        let out = Tensor::from_vec(&[b, tt, d], data)?;
        Ok(self.push(out, Op::StackTime(frames.to_vec()), false))
    }

    /// Multiplies by a fixed mask (already scaled for inverted dropout).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("dropout", self.shape(x), &[mask.len()]));
        }
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let t = Tensor::from_vec(xv.shape(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }, false))
    }
}

fn take_slot<F: Scalar>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], v: Var) -> Option<Vec<F>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    Some(grads[v.0].take().unwrap_or_else(|| vec![F::zero(); nodes[v.0].value.len()]))
}

fn put_slot<F>(grads: &mut [Option<Vec<F>>], v: Var, g: Option<Vec<F>>) {
    if g.is_some() {
        grads[v.0] = g;
    }
}

/// Runs `f` on the gradient accumulator of `v` if `v` needs a gradient.
fn with_slot<F: Scalar>(
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
    v: Var,
    f: impl FnOnce(&mut [F]),
) {
    if let Some(mut g) = take_slot(nodes, grads, v) {
        f(&mut g);
        grads[v.0] = Some(g);
    }
}

/// Propagates the output gradient `g` of node `i` into its inputs.
pub(crate) fn backprop<F: Scalar>(
    nodes: &[Node<F>],
    i: usize,
    g: &[F],
    grads: &mut [Option<Vec<F>>],
    fault: bool,
) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            with_slot(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x = *x + *y));
            with_slot(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x = *x + *y));
        }
        Op::Sub(a, b) => {
            with_slot(nodes, grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x = *x + *y));
            with_slot(nodes, grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x = *x - *y));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            with_slot(nodes, grads, *a, |ga| {
                for ((x, y), w) in ga.iter_mut().zip(g).zip(bv) {
                    *x = *x + *y * *w;
                }
            });
            with_slot(nodes, grads, *b, |gb| {
                for ((x, y), w) in gb.iter_mut().zip(g).zip(av) {
                    *x = *x + *y * *w;
                }
            });
        }
        Op::Scale(x, c) => {
            with_slot(nodes, grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b * *c));
        }
        Op::Sum(x) => {
            with_slot(nodes, grads, *x, |gx| gx.iter_mut().for_each(|a| *a = *a + g[0]));
        }
        Op::BiasAdd { x, b, inner } => {
            with_slot(nodes, grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, y)| *a = *a + *y));
            with_slot(nodes, grads, *b, |gb| {
                let c = gb.len();
                for (k, y) in g.iter().enumerate() {
                    let ch = (k / inner) % c;
                    gb[ch] = gb[ch] + *y;
                }
            });
        }
        Op::ChannelMul { x, v, inner } => {
            let (xv, vv) = (val(*x), val(*v));
            let c = vv.len();
            with_slot(nodes, grads, *x, |gx| {
                for (k, a) in gx.iter_mut().enumerate() {
                    *a = *a + g[k] * vv[(k / inner) % c];
                }
            });
            with_slot(nodes, grads, *v, |gv| {
                for (k, y) in g.iter().enumerate() {
                    let ch = (k / inner) % c;
                    gv[ch] = gv[ch] + *y * xv[k];
                }
            });
        }
        Op::Linear { x, w, b } => {
            let ws = nodes[w.0].value.shape();
            let (m, n) = (ws[0], ws[1]);
            let rows = g.len() / m.max(1);
            let (xv, wv) = (val(*x), val(*w));
            with_slot(nodes, grads, *x, |gx| {
                gemm(
                    F::one(),
                    g,
                    MatRef::row_major(0, rows, m),
                    wv,
                    MatRef::row_major(0, m, n),
                    F::one(),
                    gx,
                    MatRef::row_major(0, rows, n),
                );
            });
            with_slot(nodes, grads, *w, |gw| {
                gemm(
                    F::one(),
                    g,
                    MatRef::row_major(0, rows, m).t(),
                    xv,
                    MatRef::row_major(0, rows, n),
                    F::one(),
                    gw,
                    MatRef::row_major(0, m, n),
                );
            });
            if let Some(b) = b {
                with_slot(nodes, grads, *b, |gb| {
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, y)| *a = *a + *y);
                    }
                });
            }
        }
        Op::Conv2d { x, k, geom } => {
            let mut gk = take_slot(nodes, grads, *k);
            let mut gx = take_slot(nodes, grads, *x);
            kernels::conv2d_backward(geom, val(*x), val(*k), g, gk.as_deref_mut(), gx.as_deref_mut());
            put_slot(grads, *k, gk);
            put_slot(grads, *x, gx);
        }
        Op::TemporalConv { x, k, geom } => {
            let mut gk = take_slot(nodes, grads, *k);
            let mut gx = take_slot(nodes, grads, *x);
            kernels::tconv_backward(geom, val(*x), val(*k), g, gk.as_deref_mut(), gx.as_deref_mut());
            put_slot(grads, *k, gk);
            put_slot(grads, *x, gx);
        }
        Op::MaxGather { x, argmax } => {
            with_slot(nodes, grads, *x, |gx| {
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] = gx[src] + g[o];
                }
            });
        }
        Op::TemporalMean { x, frames, features } => {
            let scale = F::one() / F::lit(*frames as f64);
            with_slot(nodes, grads, *x, |gx| {
                for (k, a) in gx.iter_mut().enumerate() {
                    let b = k / (frames * features);
                    let f = k % features;
                    *a = *a + g[b * features + f] * scale;
                }
            });
        }
        Op::LeakyRelu { x, alpha } => {
            let xv = val(*x);
            let neg = if fault { F::one() } else { *alpha };
            with_slot(nodes, grads, *x, |gx| {
                for ((a, y), v) in gx.iter_mut().zip(g).zip(xv) {
                    *a = *a + if *v > F::zero() { *y } else { *y * neg };
                }
            });
        }
        Op::Sigmoid(x) => {
            let yv = node.value.data();
            with_slot(nodes, grads, *x, |gx| {
                for ((a, d), y) in gx.iter_mut().zip(g).zip(yv) {
                    *a = *a + *d * *y * (F::one() - *y);
                }
            });
        }
        Op::Tanh(x) => {
            let yv = node.value.data();
            with_slot(nodes, grads, *x, |gx| {
                for ((a, d), y) in gx.iter_mut().zip(g).zip(yv) {
                    *a = *a + *d * (F::one() - *y * *y);
                }
            });
        }
        Op::Softmax(x) => {
            let yv = node.value.data();
            let k = *node.value.shape().last().unwrap();
            with_slot(nodes, grads, *x, |gx| {
                for ((gr, dr), yr) in gx.chunks_mut(k).zip(g.chunks(k)).zip(yv.chunks(k)) {
                    let dot: F = dr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    for ((a, d), y) in gr.iter_mut().zip(dr).zip(yr) {
                        *a = *a + *y * (*d - dot);
                    }
                }
            });
        }
        Op::CrossEntropy { p, labels } => {
            let pv = val(*p);
            let k = *nodes[p.0].value.shape().last().unwrap();
            let rows = F::lit(labels.len() as f64);
            let clamp = F::lit(LOG_CLAMP);
            with_slot(nodes, grads, *p, |gp| {
                for (r, &l) in labels.iter().enumerate() {
                    let v = pv[r * k + l];
                    if v > clamp {
                        gp[r * k + l] = gp[r * k + l] - g[0] / (rows * v);
                    }
                }
            });
        }
        Op::Reshape(x) => {
            with_slot(nodes, grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(a, y)| *a = *a + *y));
        }
        Op::SliceLast { x, start } => {
            let d = *nodes[x.0].value.shape().last().unwrap();
            let len = *node.value.shape().last().unwrap();
            with_slot(nodes, grads, *x, |gx| {
                for (row, grow) in gx.chunks_mut(d).zip(g.chunks(len)) {
                    for (a, y) in row[*start..*start + len].iter_mut().zip(grow) {
                        *a = *a + *y;
                    }
                }
            });
        }
        Op::SelectTime { x, t } => {
            let xs = nodes[x.0].value.shape();
            let (b, tt, d) = (xs[0], xs[1], xs[2]);
            with_slot(nodes, grads, *x, |gx| {
                for bi in 0..b {
                    let dst = &mut gx[(bi * tt + t) * d..(bi * tt + t + 1) * d];
                    dst.iter_mut().zip(&g[bi * d..(bi + 1) * d]).for_each(|(a, y)| *a = *a + *y);
                }
            });
        }
        Op::StackTime(frames) => {
            let s = node.value.shape();
            let (b, tt, d) = (s[0], s[1], s[2]);
            for (t, f) in frames.iter().enumerate() {
                with_slot(nodes, grads, *f, |gf| {
                    for bi in 0..b {
                        let src = &g[(bi * tt + t) * d..(bi * tt + t + 1) * d];
                        gf[bi * d..(bi + 1) * d].iter_mut().zip(src).for_each(|(a, y)| *a = *a + *y);
                    }
                });
            }
        }
        Op::Dropout { x, mask } => {
            with_slot(nodes, grads, *x, |gx| {
                for ((a, y), m) in gx.iter_mut().zip(g).zip(mask) {
                    *a = *a + *y * *m;
                }
            });
        }
    }
}
