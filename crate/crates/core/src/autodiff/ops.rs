//! Primitive operations and their backward rules.
//!
//! Every backward rule is written in terms of other primitives, so the
//! gradient of a recorded graph is itself a recorded graph whenever the
//! upstream gradient or the saved inputs carry nodes. Linear structural ops
//! come in adjoint pairs (expand/sum_to, narrow/pad, unfold/fold,
//! gather/scatter_add) which keeps derivatives of any order closed.

use std::sync::Arc;

use super::tensor::{numel, Tensor};
use super::{AutodiffError, Result};

/// Geometry of a 1-D convolution: input `(batch, channels, len)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dGeom {
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dGeom {
    pub fn out_len(&self) -> Option<usize> {
        let span = self.dilation * (self.kernel.checked_sub(1)?) + 1;
        let padded = self.len + self.pad_left + self.pad_right;
        if self.stride == 0 || padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Geometry of a 2-D convolution: input `(batch, channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let ph = self.height + 2 * self.pad_h;
        let pw = self.width + 2 * self.pad_w;
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 || ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        Some(((ph - self.kernel_h) / self.stride + 1, (pw - self.kernel_w) / self.stride + 1))
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    MatMul { ta: bool, tb: bool },
    Reshape,
    Permute(Vec<usize>),
    Expand,
    SumTo,
    Relu,
    Sigmoid,
    Softmax,
    LogSoftmax,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    Pad { axis: usize, before: usize },
    Unfold1d(Conv1dGeom),
    Fold1d(Conv1dGeom),
    Unfold2d(Conv2dGeom),
    Fold2d(Conv2dGeom),
    Gather(Arc<[usize]>),
    ScatterAdd(Arc<[usize]>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Expand => "expand",
            Op::SumTo => "sum_to",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Pad { .. } => "pad",
            Op::Unfold1d(_) => "unfold1d",
            Op::Fold1d(_) => "fold1d",
            Op::Unfold2d(_) => "unfold2d",
            Op::Fold2d(_) => "fold2d",
            Op::Gather(_) => "gather",
            Op::ScatterAdd(_) => "scatter_add",
        }
    }

    /// Vector-Jacobian product: gradients for each parent given the
    /// gradient `g` of the output. Parents are passed in as the caller
    /// wants them recorded (detached for plain first-order passes).
    /// Binary products skip parents whose `need` flag is off and return a
    /// scalar placeholder in their slot.
    pub(crate) fn backward(
        &self,
        g: &Tensor,
        parents: &[Tensor],
        out_shape: &[usize],
        need: &[bool],
    ) -> Result<Vec<Tensor>> {
        let p = parents;
        let pick = |i: usize, f: &dyn Fn() -> Result<Tensor>| -> Result<Tensor> {
            if need[i] {
                f()
            } else {
                Ok(Tensor::scalar(0.0))
            }
        };
        Ok(match self {
            Op::Leaf => Vec::new(),
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.neg()],
            Op::Mul => vec![pick(0, &|| g.mul(&p[1]))?, pick(1, &|| g.mul(&p[0]))?],
            Op::Neg => vec![g.neg()],
            Op::Scale(c) => vec![g.scale(*c)],
            Op::MatMul { ta, tb } => {
                let (a, b) = (&p[0], &p[1]);
                match (ta, tb) {
                    (false, false) => vec![
                        pick(0, &|| g.matmul_t(b, false, true))?,
                        pick(1, &|| a.matmul_t(g, true, false))?,
                    ],
                    (true, false) => vec![
                        pick(0, &|| b.matmul_t(g, false, true))?,
                        pick(1, &|| a.matmul_t(g, false, false))?,
                    ],
                    (false, true) => vec![
                        pick(0, &|| g.matmul_t(b, false, false))?,
                        pick(1, &|| g.matmul_t(a, true, false))?,
                    ],
                    (true, true) => vec![
                        pick(0, &|| b.matmul_t(g, true, true))?,
                        pick(1, &|| g.matmul_t(a, true, true))?,
                    ],
                }
            }
            Op::Reshape => vec![g.reshape(p[0].shape())?],
            Op::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &axis) in perm.iter().enumerate() {
                    inv[axis] = i;
                }
                vec![g.permute(&inv)?]
            }
            Op::Expand => vec![g.sum_to(p[0].shape())?],
            Op::SumTo => vec![g.expand(p[0].shape())?],
            Op::Relu => {
                let mask: Vec<f64> = p[0].data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
                vec![g.mul(&Tensor::raw(p[0].shape().to_vec(), mask))?]
            }
            Op::Sigmoid => {
                let s = p[0].sigmoid();
                let ds = s.sub(&s.mul(&s)?)?;
                vec![g.mul(&ds)?]
            }
            Op::Softmax => {
                let s = p[0].softmax()?;
                let gs = g.mul(&s)?;
                let row = gs.sum_to(&keep_last_one(out_shape))?.expand(out_shape)?;
                vec![gs.sub(&s.mul(&row)?)?]
            }
            Op::LogSoftmax => {
                let s = p[0].softmax()?;
                let row = g.sum_to(&keep_last_one(out_shape))?.expand(out_shape)?;
                vec![g.sub(&s.mul(&row)?)?]
            }
            Op::Concat { axis } => {
                let mut start = 0;
                let mut grads = Vec::with_capacity(p.len());
                for part in p {
                    let len = part.shape()[*axis];
                    grads.push(g.narrow(*axis, start, len)?);
                    start += len;
                }
                grads
            }
            Op::Narrow { axis, start } => {
                let full = p[0].shape()[*axis];
                let len = out_shape[*axis];
                vec![g.pad_axis(*axis, *start, full - start - len)?]
            }
            Op::Pad { axis, before } => vec![g.narrow(*axis, *before, p[0].shape()[*axis])?],
            Op::Unfold1d(geom) => vec![g.fold1d(*geom)?],
            Op::Fold1d(geom) => vec![g.unfold1d(*geom)?],
            Op::Unfold2d(geom) => vec![g.fold2d(*geom)?],
            Op::Fold2d(geom) => vec![g.unfold2d(*geom)?],
            Op::Gather(idx) => vec![g.scatter_add(idx.clone(), p[0].shape())?],
            Op::ScatterAdd(idx) => vec![g.gather(idx.clone(), p[0].shape())?],
        })
    }
}

fn keep_last_one(shape: &[usize]) -> Vec<usize> {
    let mut s = shape.to_vec();
    if let Some(last) = s.last_mut() {
        *last = 1;
    }
    s
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

/// For each flat index of `dst`, the flat index of `src` it reads under
/// right-aligned broadcasting.
fn broadcast_index_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let offset = dst.len() - src.len();
    let src_strides = Tensor::strides(src);
    let n = numel(dst);
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; dst.len()];
    for _ in 0..n {
        let mut idx = 0;
        for (d, &c) in counter.iter().enumerate().skip(offset) {
            let sd = d - offset;
            if src[sd] != 1 {
                idx += c * src_strides[sd];
            }
        }
        map.push(idx);
        for d in (0..dst.len()).rev() {
            counter[d] += 1;
            if counter[d] < dst[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    map
}

fn broadcastable(src: &[usize], dst: &[usize]) -> bool {
    if src.len() > dst.len() {
        return false;
    }
    let offset = dst.len() - src.len();
    src.iter().enumerate().all(|(i, &s)| s == 1 || s == dst[i + offset])
}

impl Tensor {
    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        self.same_shape(other, op)?;
        Ok(self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let data = self.zip(other, "add", |a, b| a + b)?;
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Add, vec![self.clone(), other.clone()]))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let data = self.zip(other, "sub", |a, b| a - b)?;
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Sub, vec![self.clone(), other.clone()]))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let data = self.zip(other, "mul", |a, b| a * b)?;
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Mul, vec![self.clone(), other.clone()]))
    }

    /// Add with right-aligned broadcasting of `other` onto `self`'s shape.
    pub fn add_bcast(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.expand(self.shape())?)
    }

    pub fn mul_bcast(&self, other: &Tensor) -> Result<Tensor> {
        self.mul(&other.expand(self.shape())?)
    }

    pub fn neg(&self) -> Tensor {
        let data = self.data().iter().map(|v| -v).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Neg, vec![self.clone()])
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(c), vec![self.clone()])
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&self, other: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
        if self.ndim() != 2 || other.ndim() != 2 {
            return Err(mismatch(
                "matmul",
                format!("operands must be 2-D, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        }
        let (ar, ac) = (self.shape()[0], self.shape()[1]);
        let (br, bc) = (other.shape()[0], other.shape()[1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch(
                "matmul",
                format!(
                    "inner dimensions differ: {:?}{} x {:?}{}",
                    self.shape(),
                    if ta { "ᵀ" } else { "" },
                    other.shape(),
                    if tb { "ᵀ" } else { "" }
                ),
            ));
        }
        let a = self.data();
        let b = other.data();
        let mut c = vec![0.0; m * n];
        match (ta, tb) {
            (false, false) => {
                for i in 0..m {
                    let crow = &mut c[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = a[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let brow = &b[p * n..(p + 1) * n];
                        for (cv, bv) in crow.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
            }
            (true, false) => {
                // a is (k, m)
                for p in 0..k {
                    let brow = &b[p * n..(p + 1) * n];
                    for i in 0..m {
                        let av = a[p * m + i];
                        if av == 0.0 {
                            continue;
                        }
                        let crow = &mut c[i * n..(i + 1) * n];
                        for (cv, bv) in crow.iter_mut().zip(brow) {
                            *cv += av * bv;
                        }
                    }
                }
            }
            (false, true) => {
                // b is (n, k)
                for i in 0..m {
                    let arow = &a[i * k..(i + 1) * k];
                    for j in 0..n {
                        let brow = &b[j * k..(j + 1) * k];
                        c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
            }
            (true, true) => {
                // a is (k, m), b is (n, k)
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for p in 0..k {
                            acc += a[p * m + i] * b[j * k + p];
                        }
                        c[i * n + j] = acc;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            vec![m, n],
            c,
            Op::MatMul { ta, tb },
            vec![self.clone(), other.clone()],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(mismatch("reshape", format!("{:?} -> {:?}", self.shape(), shape)));
        }
        Ok(Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape, vec![self.clone()]))
    }

    /// Collapse everything after the leading axis.
    pub fn flatten(&self) -> Result<Tensor> {
        match self.shape().first() {
            Some(&b) => self.reshape(&[b, self.numel() / b.max(1)]),
            None => self.reshape(&[1, 1]),
        }
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(mismatch("permute", format!("invalid permutation {:?} for {:?}", perm, self.shape())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&a| self.shape()[a]).collect();
        let in_strides = Tensor::strides(self.shape());
        let src = self.data();
        let n = self.numel();
        let mut data = Vec::with_capacity(n);
        let mut counter = vec![0usize; nd];
        for _ in 0..n {
            let idx: usize = counter.iter().zip(perm).map(|(&c, &a)| c * in_strides[a]).sum();
            data.push(src[idx]);
            for d in (0..nd).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        Ok(Tensor::from_op(out_shape, data, Op::Permute(perm.to_vec()), vec![self.clone()]))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.permute(&[1, 0])
    }

    /// Broadcast to `shape` (right-aligned, size-1 axes repeat).
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if !broadcastable(self.shape(), shape) {
            return Err(mismatch("expand", format!("{:?} cannot broadcast to {:?}", self.shape(), shape)));
        }
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let map = broadcast_index_map(self.shape(), shape);
        let src = self.data();
        let data = map.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(shape.to_vec(), data, Op::Expand, vec![self.clone()]))
    }

    /// Sum over broadcast axes so the result has `shape`; adjoint of `expand`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if !broadcastable(shape, self.shape()) {
            return Err(mismatch("sum_to", format!("{:?} cannot reduce to {:?}", self.shape(), shape)));
        }
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let map = broadcast_index_map(shape, self.shape());
        let mut data = vec![0.0; numel(shape)];
        for (&i, &v) in map.iter().zip(self.data()) {
            data[i] += v;
        }
        Ok(Tensor::from_op(shape.to_vec(), data, Op::SumTo, vec![self.clone()]))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        self.sum_to(&[]).expect("every shape reduces to a scalar")
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Relu, vec![self.clone()])
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { 1.0 / (1.0 + (-v).exp()) } else { v.exp() / (1.0 + v.exp()) })
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Sigmoid, vec![self.clone()])
    }

    fn rows(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape().last() {
            Some(&c) if c > 0 => Ok((self.numel() / c, c)),
            _ => Err(mismatch(op, format!("needs a non-empty last axis, got {:?}", self.shape()))),
        }
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&self) -> Result<Tensor> {
        let (rows, cols) = self.rows("softmax")?;
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * cols..(r + 1) * cols];
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::Softmax, vec![self.clone()]))
    }

    /// Log-softmax over the last axis, max-subtracted.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let (rows, cols) = self.rows("log_softmax")?;
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        Ok(Tensor::from_op(self.shape().to_vec(), data, Op::LogSoftmax, vec![self.clone()]))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs".to_string()))?;
        if axis >= first.ndim() {
            return Err(mismatch("concat", format!("axis {} out of range for {:?}", axis, first.shape())));
        }
        let mut total = 0;
        for p in parts {
            let same_rank = p.ndim() == first.ndim();
            let agrees = same_rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !agrees {
                return Err(mismatch(
                    "concat",
                    format!("{:?} vs {:?} along axis {}", p.shape(), first.shape(), axis),
                ));
            }
            total += p.shape()[axis];
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor::from_op(shape, data, Op::Concat { axis }, parts.to_vec()))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return Err(mismatch(
                "narrow",
                format!("[{}, {}) on axis {} of {:?}", start, start + len, axis, self.shape()),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let full = self.shape()[axis];
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Ok(Tensor::from_op(shape, data, Op::Narrow { axis, start }, vec![self.clone()]))
    }

    /// Zero-pad along `axis`; adjoint of `narrow`.
    pub fn pad_axis(&self, axis: usize, before: usize, after: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(mismatch("pad", format!("axis {} out of range for {:?}", axis, self.shape())));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let len = self.shape()[axis];
        let mut shape = self.shape().to_vec();
        shape[axis] = before + len + after;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            data.extend(std::iter::repeat_n(0.0, before * inner));
            data.extend_from_slice(&self.data()[o * len * inner..(o + 1) * len * inner]);
            data.extend(std::iter::repeat_n(0.0, after * inner));
        }
        Ok(Tensor::from_op(shape, data, Op::Pad { axis, before }, vec![self.clone()]))
    }

    /// im2col for 1-D convolution: `(B, C, L)` -> `(C*K, B*L_out)`.
    pub fn unfold1d(&self, geom: Conv1dGeom) -> Result<Tensor> {
        let expect = [geom.batch, geom.channels, geom.len];
        if self.shape() != expect {
            return Err(mismatch("unfold1d", format!("input {:?}, geometry expects {:?}", self.shape(), expect)));
        }
        let lout = geom
            .out_len()
            .ok_or_else(|| mismatch("unfold1d", format!("empty output for geometry {:?}", geom)))?;
        let (b_n, c_n, l, k_n) = (geom.batch, geom.channels, geom.len, geom.kernel);
        let cols = b_n * lout;
        let mut data = vec![0.0; c_n * k_n * cols];
        let src = self.data();
        for c in 0..c_n {
            for k in 0..k_n {
                let row = (c * k_n + k) * cols;
                for b in 0..b_n {
                    for t in 0..lout {
                        let pos = (t * geom.stride + k * geom.dilation) as isize - geom.pad_left as isize;
                        if pos >= 0 && (pos as usize) < l {
                            data[row + b * lout + t] = src[(b * c_n + c) * l + pos as usize];
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(vec![c_n * k_n, cols], data, Op::Unfold1d(geom), vec![self.clone()]))
    }

    /// col2im for 1-D convolution; adjoint of `unfold1d`.
    pub fn fold1d(&self, geom: Conv1dGeom) -> Result<Tensor> {
        let lout = geom
            .out_len()
            .ok_or_else(|| mismatch("fold1d", format!("empty output for geometry {:?}", geom)))?;
        let (b_n, c_n, l, k_n) = (geom.batch, geom.channels, geom.len, geom.kernel);
        let cols = b_n * lout;
        if self.shape() != [c_n * k_n, cols] {
            return Err(mismatch("fold1d", format!("input {:?}, expected {:?}", self.shape(), [c_n * k_n, cols])));
        }
        let mut data = vec![0.0; b_n * c_n * l];
        let src = self.data();
        for c in 0..c_n {
            for k in 0..k_n {
                let row = (c * k_n + k) * cols;
                for b in 0..b_n {
                    for t in 0..lout {
                        let pos = (t * geom.stride + k * geom.dilation) as isize - geom.pad_left as isize;
                        if pos >= 0 && (pos as usize) < l {
                            data[(b * c_n + c) * l + pos as usize] += src[row + b * lout + t];
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(vec![b_n, c_n, l], data, Op::Fold1d(geom), vec![self.clone()]))
    }

    /// im2col for 2-D convolution: `(B, C, H, W)` -> `(C*KH*KW, B*H_out*W_out)`.
    pub fn unfold2d(&self, geom: Conv2dGeom) -> Result<Tensor> {
        let expect = [geom.batch, geom.channels, geom.height, geom.width];
        if self.shape() != expect {
            return Err(mismatch("unfold2d", format!("input {:?}, geometry expects {:?}", self.shape(), expect)));
        }
        let (ho, wo) = geom
            .out_hw()
            .ok_or_else(|| mismatch("unfold2d", format!("empty output for geometry {:?}", geom)))?;
        let rows = geom.channels * geom.kernel_h * geom.kernel_w;
        let cols = geom.batch * ho * wo;
        let mut data = vec![0.0; rows * cols];
        unfold2d_walk(&geom, ho, wo, |row, col, src_idx| data[row * cols + col] = self.data()[src_idx]);
        Ok(Tensor::from_op(vec![rows, cols], data, Op::Unfold2d(geom), vec![self.clone()]))
    }

    /// col2im for 2-D convolution; adjoint of `unfold2d`.
    pub fn fold2d(&self, geom: Conv2dGeom) -> Result<Tensor> {
        let (ho, wo) = geom
            .out_hw()
            .ok_or_else(|| mismatch("fold2d", format!("empty output for geometry {:?}", geom)))?;
        let rows = geom.channels * geom.kernel_h * geom.kernel_w;
        let cols = geom.batch * ho * wo;
        if self.shape() != [rows, cols] {
            return Err(mismatch("fold2d", format!("input {:?}, expected {:?}", self.shape(), [rows, cols])));
        }
        let mut data = vec![0.0; geom.batch * geom.channels * geom.height * geom.width];
        let src = self.data();
        unfold2d_walk(&geom, ho, wo, |row, col, dst_idx| data[dst_idx] += src[row * cols + col]);
        Ok(Tensor::from_op(
            vec![geom.batch, geom.channels, geom.height, geom.width],
            data,
            Op::Fold2d(geom),
            vec![self.clone()],
        ))
    }

    /// `out[i] = self[idx[i]]` over flat indices, reshaped to `out_shape`.
    pub fn gather(&self, idx: Arc<[usize]>, out_shape: &[usize]) -> Result<Tensor> {
        if numel(out_shape) != idx.len() || idx.iter().any(|&i| i >= self.numel()) {
            return Err(mismatch(
                "gather",
                format!("{} indices into {:?} for output {:?}", idx.len(), self.shape(), out_shape),
            ));
        }
        let src = self.data();
        let data = idx.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(out_shape.to_vec(), data, Op::Gather(idx), vec![self.clone()]))
    }

    /// Adjoint of `gather`: accumulate `self[i]` into `out[idx[i]]`.
    pub fn scatter_add(&self, idx: Arc<[usize]>, out_shape: &[usize]) -> Result<Tensor> {
        let n = numel(out_shape);
        if self.numel() != idx.len() || idx.iter().any(|&i| i >= n) {
            return Err(mismatch(
                "scatter_add",
                format!("{} values into {:?} via {} indices", self.numel(), out_shape, idx.len()),
            ));
        }
        let mut data = vec![0.0; n];
        for (&i, &v) in idx.iter().zip(self.data()) {
            data[i] += v;
        }
        Ok(Tensor::from_op(out_shape.to_vec(), data, Op::ScatterAdd(idx), vec![self.clone()]))
    }
}

fn unfold2d_walk(geom: &Conv2dGeom, ho: usize, wo: usize, mut visit: impl FnMut(usize, usize, usize)) {
    let (kh_n, kw_n) = (geom.kernel_h, geom.kernel_w);
    let (h, w) = (geom.height as isize, geom.width as isize);
    for c in 0..geom.channels {
        for kh in 0..kh_n {
            for kw in 0..kw_n {
                let row = (c * kh_n + kh) * kw_n + kw;
                for b in 0..geom.batch {
                    let plane = (b * geom.channels + c) * geom.height * geom.width;
                    for oy in 0..ho {
                        let y = (oy * geom.stride + kh) as isize - geom.pad_h as isize;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for ox in 0..wo {
                            let x = (ox * geom.stride + kw) as isize - geom.pad_w as isize;
                            if x < 0 || x >= w {
                                continue;
                            }
                            let col = (b * ho + oy) * wo + ox;
                            visit(row, col, plane + y as usize * geom.width + x as usize);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::constant(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let y = t(&[3], &[-1.0, 0.0, 2.0]).relu();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let y = t(&[1, 5], &[0.0; 5]).softmax().unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.2);
        }
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matmul_variants_agree_with_explicit_transpose() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[0.5, -1.0, 2.0, 0.0, 1.0, 3.0]);
        let plain = a.matmul(&b).unwrap();
        assert_eq!(plain.data(), &[7.5, 8.0, 18.0, 14.0]);
        let at = a.transpose().unwrap();
        let bt = b.transpose().unwrap();
        assert_eq!(at.matmul_t(&b, true, false).unwrap().data(), plain.data());
        assert_eq!(a.matmul_t(&bt, false, true).unwrap().data(), plain.data());
        assert_eq!(at.matmul_t(&bt, true, true).unwrap().data(), plain.data());
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let err = t(&[2, 3], &[0.0; 6]).matmul(&t(&[2, 2], &[0.0; 4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn dilated_conv_length_with_symmetric_padding() {
        let geom = Conv1dGeom {
            batch: 1,
            channels: 1,
            len: 100,
            kernel: 2,
            dilation: 4,
            stride: 1,
            pad_left: 2,
            pad_right: 2,
        };
        assert_eq!(geom.out_len(), Some(100));
    }

    #[test]
    fn unfold1d_reads_zero_outside_padding() {
        let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let geom = Conv1dGeom {
            batch: 1,
            channels: 1,
            len: 3,
            kernel: 2,
            dilation: 1,
            stride: 1,
            pad_left: 0,
            pad_right: 1,
        };
        let cols = x.unfold1d(geom).unwrap();
        assert_eq!(cols.shape(), &[2, 3]);
        assert_eq!(cols.data(), &[1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn expand_and_sum_to_are_adjoint_shapes() {
        let b = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let e = b.expand(&[2, 3]).unwrap();
        assert_eq!(e.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(e.sum_to(&[1, 3]).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(e.sum_to(&[3]).unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(e.sum().item().unwrap(), 12.0);
        assert!(b.expand(&[2, 4]).is_err());
    }

    #[test]
    fn concat_and_narrow_round_trip() {
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = Tensor::concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(c.narrow(1, 0, 1).unwrap().data(), a.data());
        assert_eq!(c.narrow(1, 1, 2).unwrap().data(), b.data());
    }

    #[test]
    fn permute_moves_axes() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn constants_stay_off_the_graph() {
        let x = t(&[2], &[1.0, 2.0]);
        assert!(!x.add(&x).unwrap().requires_grad());
        let v = Tensor::var(&[2], vec![1.0, 2.0]).unwrap();
        assert!(x.mul(&v).unwrap().requires_grad());
    }
}
