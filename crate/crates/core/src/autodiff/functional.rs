//! Composite layers built from the primitives in `ops`.

use std::sync::Arc;

use super::ops::{Conv1dGeom, Conv2dGeom};
use super::tensor::Tensor;
use super::{AutodiffError, Result};

/// Epsilon added to the running variance before normalizing.
pub const NORM_EPS: f64 = 1e-5;

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

/// `x · w + b` with `x: (batch, in)`, `w: (in, out)`, `b: (out)`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add_bcast(b)
}

/// 1-D convolution attributes. Padding is asymmetric.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dAttrs {
    pub dilation: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Default for Conv1dAttrs {
    fn default() -> Self {
        Self {
            dilation: 1,
            stride: 1,
            pad_left: 0,
            pad_right: 0,
        }
    }
}

/// `x: (B, C, L)`, `w: (O, C, K)`, `b: (O)` -> `(B, O, L_out)`.
pub fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, attrs: Conv1dAttrs) -> Result<Tensor> {
    if x.ndim() != 3 || w.ndim() != 3 || x.shape()[1] != w.shape()[1] || b.shape() != [w.shape()[0]] {
        return Err(mismatch(
            "conv1d",
            format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let (batch, channels, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (out_ch, kernel) = (w.shape()[0], w.shape()[2]);
    let geom = Conv1dGeom {
        batch,
        channels,
        len,
        kernel,
        dilation: attrs.dilation,
        stride: attrs.stride,
        pad_left: attrs.pad_left,
        pad_right: attrs.pad_right,
    };
    let lout = geom
        .out_len()
        .ok_or_else(|| mismatch("conv1d", format!("no output positions for length {} with {:?}", len, attrs)))?;
    let cols = x.unfold1d(geom)?;
    let y = w.reshape(&[out_ch, channels * kernel])?.matmul(&cols)?;
    let y = y.reshape(&[out_ch, batch, lout])?.permute(&[1, 0, 2])?;
    y.add_bcast(&b.reshape(&[1, out_ch, 1])?)
}

/// `x: (B, C, H, W)`, `w: (O, C, KH, KW)`, `b: (O)`; symmetric zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if x.ndim() != 4 || w.ndim() != 4 || x.shape()[1] != w.shape()[1] || b.shape() != [w.shape()[0]] {
        return Err(mismatch(
            "conv2d",
            format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let s = x.shape();
    let geom = Conv2dGeom {
        batch: s[0],
        channels: s[1],
        height: s[2],
        width: s[3],
        kernel_h: w.shape()[2],
        kernel_w: w.shape()[3],
        stride,
        pad_h: pad,
        pad_w: pad,
    };
    let (ho, wo) = geom
        .out_hw()
        .ok_or_else(|| mismatch("conv2d", format!("no output positions for {:?}", geom)))?;
    let out_ch = w.shape()[0];
    let cols = x.unfold2d(geom)?;
    let y = w.reshape(&[out_ch, geom.channels * geom.kernel_h * geom.kernel_w])?.matmul(&cols)?;
    let y = y.reshape(&[out_ch, geom.batch, ho, wo])?.permute(&[1, 0, 2, 3])?;
    y.add_bcast(&b.reshape(&[1, out_ch, 1, 1])?)
}

fn pool_windows(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if x.ndim() != 4 || x.shape()[2] < 2 || x.shape()[3] < 2 {
        return Err(mismatch(op, format!("needs (B, C, H>=2, W>=2), got {:?}", x.shape())));
    }
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3], s[2] / 2, s[3] / 2))
}

/// 2×2 max pooling with stride 2 (floor). Ties pick the first window entry.
pub fn max_pool2d(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w, ho, wo) = pool_windows(x, "max_pool2d")?;
    let src = x.data();
    let mut idx = Vec::with_capacity(b * c * ho * wo);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    x.gather(Arc::from(idx), &[b, c, ho, wo])
}

/// 2×2 average pooling with stride 2 (floor).
pub fn avg_pool2d(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w, ho, wo) = pool_windows(x, "avg_pool2d")?;
    let mut total: Option<Tensor> = None;
    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let mut idx = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            for oy in 0..ho {
                for ox in 0..wo {
                    idx.push(plane * h * w + (2 * oy + dy) * w + 2 * ox + dx);
                }
            }
        }
        let part = x.gather(Arc::from(idx), &[b, c, ho, wo])?;
        total = Some(match total {
            Some(t) => t.add(&part)?,
            None => part,
        });
    }
    Ok(total.expect("four windows").scale(0.25))
}

/// `(B, C, H, W)` -> `(B, C)` mean over the spatial axes.
pub fn global_avg_pool2d(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(mismatch("global_avg_pool2d", format!("needs rank 4, got {:?}", x.shape())));
    }
    let s = x.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    x.reshape(&[b, c, hw])?
        .sum_to(&[b, c, 1])?
        .scale(1.0 / hw as f64)
        .reshape(&[b, c])
}

/// Normalization with fixed running statistics (never batch statistics), so
/// each sample's output is independent of the rest of the batch.
///
/// Channels sit on axis 1; `mean`/`var` are constants of length `C`.
pub fn batch_norm_running(x: &Tensor, mean: &[f64], var: &[f64], gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    if x.ndim() < 2 {
        return Err(mismatch("batch_norm", format!("needs a channel axis, got {:?}", x.shape())));
    }
    let c = x.shape()[1];
    if mean.len() != c || var.len() != c || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(mismatch(
            "batch_norm",
            format!(
                "{} channels but stats {}/{} and affine {:?}/{:?}",
                c,
                mean.len(),
                var.len(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    let mut stat_shape = vec![1; x.ndim()];
    stat_shape[1] = c;
    let shift = Tensor::raw(stat_shape.clone(), mean.iter().map(|m| -m).collect());
    let inv_std = Tensor::raw(stat_shape.clone(), var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect());
    let norm = x.add_bcast(&shift)?.mul_bcast(&inv_std)?;
    norm.mul_bcast(&gamma.reshape(&stat_shape)?)?
        .add_bcast(&beta.reshape(&stat_shape)?)
}

/// Per-channel mean and (biased) variance of `x` over every axis except 1.
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.ndim() < 2 {
        return Err(mismatch("channel_moments", format!("needs a channel axis, got {:?}", x.shape())));
    }
    let s = x.shape();
    let (b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let count = (b * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * inner;
            mean[ci] += x.data()[base..base + inner].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * inner;
            var[ci] += x.data()[base..base + inner].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, var))
}

fn one_hot(labels: &[usize], rows: usize, classes: usize, op: &'static str) -> Result<Tensor> {
    if labels.len() != rows {
        return Err(mismatch(op, format!("{} labels for {} rows", labels.len(), rows)));
    }
    let mut data = vec![0.0; rows * classes];
    for (r, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(mismatch(op, format!("label {} with {} classes", y, classes)));
        }
        data[r * classes + y] = 1.0;
    }
    Ok(Tensor::raw(vec![rows, classes], data))
}

/// Mean negative log-likelihood of integer `labels` under `softmax(logits)`.
pub fn nll_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.ndim() != 2 {
        return Err(mismatch("nll_loss", format!("logits must be (batch, classes), got {:?}", logits.shape())));
    }
    let (rows, classes) = (logits.shape()[0], logits.shape()[1]);
    let target = one_hot(labels, rows, classes, "nll_loss")?;
    Ok(logits.log_softmax()?.mul(&target)?.sum().scale(-1.0 / rows.max(1) as f64))
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let diff = pred.sub(target)?;
    Ok(diff.mul(&diff)?.mean())
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let preds = argmax_rows(logits);
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Operation identifiers for [`primitive_forward`], carrying their attributes.
#[derive(Clone, Debug)]
pub enum PrimitiveOp {
    MatMul,
    Add,
    BroadcastAdd,
    Mul,
    Relu,
    Sigmoid,
    Softmax,
    LogSoftmax,
    NllLoss { labels: Vec<usize> },
    MseLoss,
    Conv1d(Conv1dAttrs),
    Conv2d { stride: usize, pad: usize },
    GlobalAvgPool,
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    Flatten,
    BatchNormRunning { mean: Vec<f64>, var: Vec<f64> },
    Sum,
    Mean,
}

fn arity(op: &PrimitiveOp, inputs: &[Tensor], n: usize, name: &'static str) -> Result<()> {
    if inputs.len() != n {
        return Err(mismatch(name, format!("{:?} takes {} inputs, got {}", op, n, inputs.len())));
    }
    Ok(())
}

/// Uniform dispatch over the primitive set.
pub fn primitive_forward(op: &PrimitiveOp, inputs: &[Tensor]) -> Result<Tensor> {
    use PrimitiveOp::*;
    match op {
        MatMul => {
            arity(op, inputs, 2, "matmul")?;
            inputs[0].matmul(&inputs[1])
        }
        Add => {
            arity(op, inputs, 2, "add")?;
            inputs[0].add(&inputs[1])
        }
        BroadcastAdd => {
            arity(op, inputs, 2, "add")?;
            inputs[0].add_bcast(&inputs[1])
        }
        Mul => {
            arity(op, inputs, 2, "mul")?;
            inputs[0].mul(&inputs[1])
        }
        Relu => {
            arity(op, inputs, 1, "relu")?;
            Ok(inputs[0].relu())
        }
        Sigmoid => {
            arity(op, inputs, 1, "sigmoid")?;
            Ok(inputs[0].sigmoid())
        }
        Softmax => {
            arity(op, inputs, 1, "softmax")?;
            inputs[0].softmax()
        }
        LogSoftmax => {
            arity(op, inputs, 1, "log_softmax")?;
            inputs[0].log_softmax()
        }
        NllLoss { labels } => {
            arity(op, inputs, 1, "nll_loss")?;
            nll_loss(&inputs[0], labels)
        }
        MseLoss => {
            arity(op, inputs, 2, "mse_loss")?;
            mse_loss(&inputs[0], &inputs[1])
        }
        Conv1d(attrs) => {
            arity(op, inputs, 3, "conv1d")?;
            conv1d(&inputs[0], &inputs[1], &inputs[2], *attrs)
        }
        Conv2d { stride, pad } => {
            arity(op, inputs, 3, "conv2d")?;
            conv2d(&inputs[0], &inputs[1], &inputs[2], *stride, *pad)
        }
        GlobalAvgPool => {
            arity(op, inputs, 1, "global_avg_pool2d")?;
            global_avg_pool2d(&inputs[0])
        }
        Concat { axis } => Tensor::concat(inputs, *axis),
        Reshape { shape } => {
            arity(op, inputs, 1, "reshape")?;
            inputs[0].reshape(shape)
        }
        Flatten => {
            arity(op, inputs, 1, "reshape")?;
            inputs[0].flatten()
        }
        BatchNormRunning { mean, var } => {
            arity(op, inputs, 3, "batch_norm")?;
            batch_norm_running(&inputs[0], mean, var, &inputs[1], &inputs[2])
        }
        Sum => {
            arity(op, inputs, 1, "sum")?;
            Ok(inputs[0].sum())
        }
        Mean => {
            arity(op, inputs, 1, "mean")?;
            Ok(inputs[0].mean())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::constant(shape, data).unwrap()
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        // one channel, kernel 2, dilation 2, pad (1, 1)
        let x = t(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2], vec![0.5, -1.0]);
        let b = t(&[1], vec![0.25]);
        let attrs = Conv1dAttrs {
            dilation: 2,
            stride: 1,
            pad_left: 1,
            pad_right: 1,
        };
        let y = conv1d(&x, &w, &b, attrs).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4]);
        let padded = [0.0, 1.0, 2.0, 3.0, 4.0, 0.0];
        for t in 0..4 {
            let expect = 0.5 * padded[t] - padded[t + 2] + 0.25;
            assert!((y.data()[t] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn conv1d_length_100_kernel_2_dilation_4() {
        let x = Tensor::zeros(&[1, 1, 100]);
        let w = Tensor::zeros(&[1, 1, 2]);
        let b = Tensor::zeros(&[1]);
        let attrs = Conv1dAttrs {
            dilation: 4,
            stride: 1,
            pad_left: 2,
            pad_right: 2,
        };
        assert_eq!(conv1d(&x, &w, &b, attrs).unwrap().shape(), &[1, 1, 100]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t(&[1, 1, 3, 3], k);
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn pools() {
        let x = t(&[1, 1, 2, 2], vec![1.0, 5.0, 3.0, 4.0]);
        assert_eq!(max_pool2d(&x).unwrap().data(), &[5.0]);
        assert_eq!(avg_pool2d(&x).unwrap().data(), &[3.25]);
        assert_eq!(global_avg_pool2d(&x).unwrap().data(), &[3.25]);
    }

    #[test]
    fn nll_of_uniform_logits_is_log_classes() {
        let logits = Tensor::zeros(&[3, 4]);
        let loss = nll_loss(&logits, &[0, 1, 3]).unwrap().item().unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-14);
        assert!(nll_loss(&logits, &[0, 4, 1]).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let logits = t(&[2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
        assert_eq!(argmax_rows(&logits), vec![0, 1]);
    }

    #[test]
    fn running_norm_uses_given_statistics() {
        let x = t(&[2, 1], vec![3.0, 5.0]);
        let y = batch_norm_running(&x, &[1.0], &[4.0 - NORM_EPS], &Tensor::ones(&[1]), &Tensor::zeros(&[1])).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn primitive_dispatch_checks_arity() {
        let x = t(&[3], vec![-1.0, 0.0, 2.0]);
        let y = primitive_forward(&PrimitiveOp::Relu, &[x.clone()]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        assert!(primitive_forward(&PrimitiveOp::Add, &[x]).is_err());
    }
}
