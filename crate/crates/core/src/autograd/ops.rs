//! The closed op vocabulary shared by the eager evaluator and the tape.
//!
//! Every op is a pair of pure functions: [`forward_op`] computes the output
//! from input values, [`backward_op`] maps an output gradient to one gradient
//! per input. Backward recomputes whatever intermediates it needs from the
//! inputs, so nothing besides values has to live on the tape.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::render::transmittance_weights;

use super::Tensor;

/// Per-ray sample ordering consumed by the fused compositing op.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySpan {
    /// Row indices into the `sigma`/`rgb` inputs, sorted by depth.
    pub rows: Vec<usize>,
    /// Interval width of each sample, aligned with `rows`.
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayLayout {
    pub rays: Vec<RaySpan>,
    pub background: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

/// Running statistics used by batch norm in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BATCHNORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    MatMul,
    Add,
    Mul,
    Concat {
        axis: usize,
    },
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Neg,
    Square,
    Sum {
        axis: Option<usize>,
    },
    Mean {
        axis: Option<usize>,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Conv2d(Conv2dSpec),
    /// `running == None` normalizes with batch statistics (training mode).
    BatchNorm2d {
        running: Option<Arc<RunningStats>>,
    },
    /// Fused quadrature compositing: inputs `sigma [P,1]`, `rgb [P,3]`,
    /// output `[rays, 3]`.
    Composite(Arc<RayLayout>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Concat { .. } => "concat",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Exp => "exp",
            Op::Neg => "neg",
            Op::Square => "square",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Conv2d(_) => "conv2d",
            Op::BatchNorm2d { .. } => "batchnorm2d",
            Op::Composite(_) => "composite",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Concat { .. } => None,
            Op::MatMul | Op::Add | Op::Mul | Op::Composite(_) => Some(2),
            Op::Conv2d(_) | Op::BatchNorm2d { .. } => Some(3),
            _ => Some(1),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Evaluates `op` on `inputs`. The result is checked for non-finite values.
pub fn forward_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(Error::contract(format!(
                "{} takes {n} inputs, got {}",
                op.name(),
                inputs.len()
            )));
        }
    }
    let out = match op {
        Op::MatMul => matmul(inputs[0], inputs[1])?,
        Op::Add => broadcast_binary(inputs[0], inputs[1], |a, b| a + b)?,
        Op::Mul => broadcast_binary(inputs[0], inputs[1], |a, b| a * b)?,
        Op::Concat { axis } => concat(inputs, *axis)?,
        Op::Relu => inputs[0].map(|v| v.max(0.0)),
        Op::Sigmoid => inputs[0].map(sigmoid),
        Op::Softplus => inputs[0].map(softplus),
        Op::Exp => inputs[0].map(f64::exp),
        Op::Neg => inputs[0].map(|v| -v),
        Op::Square => inputs[0].map(|v| v * v),
        Op::Sum { axis } => reduce_sum(inputs[0], *axis, 1.0)?,
        Op::Mean { axis } => {
            let n = reduced_count(inputs[0], *axis)?;
            reduce_sum(inputs[0], *axis, 1.0 / n as f64)?
        }
        Op::Slice { axis, start, end } => slice(inputs[0], *axis, *start, *end)?,
        Op::Reshape { shape } => {
            if shape.iter().product::<usize>() != inputs[0].len() {
                return Err(Error::shape(format!(
                    "cannot reshape {:?} to {shape:?}",
                    inputs[0].shape()
                )));
            }
            inputs[0].reshaped(shape.clone())?
        }
        Op::Conv2d(spec) => conv2d(inputs[0], inputs[1], inputs[2], *spec)?,
        Op::BatchNorm2d { running } => batchnorm2d(inputs[0], inputs[1], inputs[2], running.as_deref())?,
        Op::Composite(layout) => composite_forward(inputs[0], inputs[1], layout)?,
    };
    if !out.is_finite() {
        return Err(Error::numerics(format!("{} produced a non-finite value", op.name())));
    }
    Ok(out)
}

/// Gradients of a scalar objective with respect to each input, given the
/// gradient `grad` with respect to `output`.
pub fn backward_op(op: &Op, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
    let elementwise = |f: &dyn Fn(f64, f64) -> f64| -> Tensor {
        let x = inputs[0];
        let data = x.data().iter().zip(grad.data()).map(|(&xv, &g)| f(xv, g)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    };
    Ok(match op {
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = a.dims2()?;
            let (_, n) = b.dims2()?;
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            // dA = G · Bᵀ
            gemm(m, n, k, grad.data(), (n, 1), b.data(), (1, n), &mut ga, k);
            // dB = Aᵀ · G
            gemm(k, m, n, a.data(), (1, k), grad.data(), (n, 1), &mut gb, n);
            vec![Tensor::new(vec![m, k], ga)?, Tensor::new(vec![k, n], gb)?]
        }
        Op::Add => {
            let gb = reduce_to_shape(grad, inputs[1])?;
            vec![grad.clone(), gb]
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let ga = broadcast_binary(grad, b, |g, bv| g * bv)?;
            let prod = broadcast_binary(grad, a, |g, av| g * av)?;
            // prod has a's shape; reduce to b's shape
            let gb = reduce_to_shape(&prod, b)?;
            vec![ga, gb]
        }
        Op::Concat { axis } => split_grad(grad, inputs, *axis)?,
        Op::Relu => vec![elementwise(&|x, g| if x > 0.0 { g } else { 0.0 })],
        Op::Sigmoid => {
            let data = output
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&s, &g)| g * s * (1.0 - s))
                .collect();
            vec![Tensor::new(output.shape().to_vec(), data)?]
        }
        Op::Softplus => vec![elementwise(&|x, g| g * sigmoid(x))],
        Op::Exp => {
            let data = output.data().iter().zip(grad.data()).map(|(&e, &g)| g * e).collect();
            vec![Tensor::new(output.shape().to_vec(), data)?]
        }
        Op::Neg => vec![grad.map(|g| -g)],
        Op::Square => vec![elementwise(&|x, g| 2.0 * x * g)],
        Op::Sum { axis } => vec![expand_reduced(grad, inputs[0], *axis, 1.0)?],
        Op::Mean { axis } => {
            let n = reduced_count(inputs[0], *axis)?;
            vec![expand_reduced(grad, inputs[0], *axis, 1.0 / n as f64)?]
        }
        Op::Slice { axis, start, end } => {
            vec![slice_grad(grad, inputs[0], *axis, *start, *end)?]
        }
        Op::Reshape { .. } => vec![grad.reshaped(inputs[0].shape().to_vec())?],
        Op::Conv2d(spec) => conv2d_backward(inputs[0], inputs[1], grad, *spec)?,
        Op::BatchNorm2d { running } => batchnorm2d_backward(inputs[0], inputs[1], grad, running.as_deref())?,
        Op::Composite(layout) => composite_backward(inputs[0], inputs[1], grad, layout)?,
    })
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: all strides describe in-bounds accesses for the given dims and
    // `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!("matmul {:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, n);
    Tensor::new(vec![m, n], out)
}

enum Broadcast {
    Same,
    Row(usize),
    Scalar,
}

fn broadcast_kind(a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if b.len() == 1 && b.shape().iter().all(|&d| d == 1) {
        return Ok(Broadcast::Scalar);
    }
    let last = a.shape().last().copied().unwrap_or(1);
    let row_like = match b.shape() {
        [d] => *d == last,
        [1, d] => *d == last,
        _ => false,
    };
    if row_like && a.ndim() >= 1 {
        return Ok(Broadcast::Row(last));
    }
    Err(Error::shape(format!(
        "cannot broadcast {:?} onto {:?}",
        b.shape(),
        a.shape()
    )))
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let data: Vec<f64> = match broadcast_kind(a, b)? {
        Broadcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => {
            let y = b.data()[0];
            a.data().iter().map(|&x| f(x, y)).collect()
        }
        Broadcast::Row(d) => a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % d]))
            .collect(),
    };
    Tensor::new(a.shape().to_vec(), data)
}

/// Sums `g` (shaped like the broadcast result) down to `target`'s shape.
fn reduce_to_shape(g: &Tensor, target: &Tensor) -> Result<Tensor> {
    if g.shape() == target.shape() {
        return Ok(g.clone());
    }
    if target.len() == 1 {
        let s: f64 = g.data().iter().sum();
        return Tensor::new(target.shape().to_vec(), vec![s]);
    }
    let d = target.len();
    let mut out = vec![0.0; d];
    for (i, v) in g.data().iter().enumerate() {
        out[i % d] += v;
    }
    Tensor::new(target.shape().to_vec(), out)
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::contract("concat of zero tensors"))?;
    let rank = first.ndim();
    let mut mids = Vec::with_capacity(inputs.len());
    for t in inputs {
        let ok = t.ndim() == rank
            && axis < rank
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(format!(
                "concat along {axis}: {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
        mids.push(t.shape()[axis]);
    }
    let (outer, _, inner) = axis_split(first.shape(), axis)?;
    let total_mid: usize = mids.iter().sum();
    let mut data = Vec::with_capacity(outer * total_mid * inner);
    for o in 0..outer {
        for (t, &mid) in inputs.iter().zip(&mids) {
            let block = mid * inner;
            data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total_mid;
    Tensor::new(shape, data)
}

fn split_grad(grad: &Tensor, inputs: &[&Tensor], axis: usize) -> Result<Vec<Tensor>> {
    let (outer, total_mid, inner) = axis_split(grad.shape(), axis)?;
    let mut outs: Vec<Vec<f64>> = inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
    for o in 0..outer {
        let mut offset = o * total_mid * inner;
        for (t, buf) in inputs.iter().zip(outs.iter_mut()) {
            let block = t.shape()[axis] * inner;
            buf.extend_from_slice(&grad.data()[offset..offset + block]);
            offset += block;
        }
    }
    inputs
        .iter()
        .zip(outs)
        .map(|(t, d)| Tensor::new(t.shape().to_vec(), d))
        .collect()
}

fn slice(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    let (outer, mid, inner) = axis_split(x.shape(), axis)?;
    if start >= end || end > mid {
        return Err(Error::shape(format!(
            "slice {start}..{end} along axis {axis} of {:?}",
            x.shape()
        )));
    }
    let width = end - start;
    let mut data = Vec::with_capacity(outer * width * inner);
    for o in 0..outer {
        let base = o * mid * inner;
        data.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = width;
    Tensor::new(shape, data)
}

fn slice_grad(grad: &Tensor, x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    let (outer, mid, inner) = axis_split(x.shape(), axis)?;
    let width = end - start;
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        let dst = o * mid * inner + start * inner;
        let src = o * width * inner;
        out[dst..dst + width * inner].copy_from_slice(&grad.data()[src..src + width * inner]);
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn reduced_count(x: &Tensor, axis: Option<usize>) -> Result<usize> {
    let n = match axis {
        None => x.len(),
        Some(a) => axis_split(x.shape(), a)?.1,
    };
    if n == 0 {
        return Err(Error::shape("mean over an empty axis"));
    }
    Ok(n)
}

fn reduce_sum(x: &Tensor, axis: Option<usize>, scale: f64) -> Result<Tensor> {
    match axis {
        None => Ok(Tensor::scalar(x.data().iter().sum::<f64>() * scale)),
        Some(a) => {
            let (outer, mid, inner) = axis_split(x.shape(), a)?;
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += x.data()[base + i];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v *= scale);
            let mut shape = x.shape().to_vec();
            shape[a] = 1;
            Tensor::new(shape, out)
        }
    }
}

fn expand_reduced(grad: &Tensor, x: &Tensor, axis: Option<usize>, scale: f64) -> Result<Tensor> {
    match axis {
        None => {
            let g = grad.item()? * scale;
            Ok(Tensor::full(x.shape().to_vec(), g))
        }
        Some(a) => {
            let (outer, mid, inner) = axis_split(x.shape(), a)?;
            let mut out = vec![0.0; x.len()];
            for o in 0..outer {
                for m in 0..mid {
                    let base = (o * mid + m) * inner;
                    for i in 0..inner {
                        out[base + i] = grad.data()[o * inner + i] * scale;
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), out)
        }
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv_dims(x: &Tensor, weight: &Tensor, spec: Conv2dSpec) -> Result<ConvDims> {
    let (&[batch, cin, h, w], &[cout, cin2, kh, kw]) = (x.shape(), weight.shape()) else {
        return Err(Error::shape(format!(
            "conv2d expects [B,C,H,W] and [O,C,KH,KW], got {:?} and {:?}",
            x.shape(),
            weight.shape()
        )));
    };
    if cin != cin2 || spec.stride == 0 || h + 2 * spec.pad < kh || w + 2 * spec.pad < kw {
        return Err(Error::shape(format!(
            "conv2d input {:?} incompatible with kernel {:?} (stride {}, pad {})",
            x.shape(),
            weight.shape(),
            spec.stride,
            spec.pad
        )));
    }
    Ok(ConvDims {
        batch,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho: (h + 2 * spec.pad - kh) / spec.stride + 1,
        wo: (w + 2 * spec.pad - kw) / spec.stride + 1,
    })
}

/// Calls `f(out_index, in_index, weight_index)` for every in-bounds tap.
fn conv_taps(d: &ConvDims, spec: Conv2dSpec, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..d.batch {
        for o in 0..d.cout {
            for oy in 0..d.ho {
                for ox in 0..d.wo {
                    let out_idx = ((b * d.cout + o) * d.ho + oy) * d.wo + ox;
                    for c in 0..d.cin {
                        for ky in 0..d.kh {
                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.kw {
                                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let in_idx = ((b * d.cin + c) * d.h + iy as usize) * d.w + ix as usize;
                                let w_idx = ((o * d.cin + c) * d.kh + ky) * d.kw + kx;
                                f(out_idx, in_idx, w_idx);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let d = conv_dims(x, weight, spec)?;
    if bias.len() != d.cout {
        return Err(Error::shape(format!(
            "conv2d bias has {} entries for {} output channels",
            bias.len(),
            d.cout
        )));
    }
    let plane = d.ho * d.wo;
    let mut out = vec![0.0; d.batch * d.cout * plane];
    for (i, v) in out.iter_mut().enumerate() {
        *v = bias.data()[(i / plane) % d.cout];
    }
    let (xd, wd) = (x.data(), weight.data());
    conv_taps(&d, spec, |o, i, w| out[o] += xd[i] * wd[w]);
    Tensor::new(vec![d.batch, d.cout, d.ho, d.wo], out)
}

fn conv2d_backward(x: &Tensor, weight: &Tensor, grad: &Tensor, spec: Conv2dSpec) -> Result<Vec<Tensor>> {
    let d = conv_dims(x, weight, spec)?;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; d.cout];
    let plane = d.ho * d.wo;
    for (i, g) in grad.data().iter().enumerate() {
        gb[(i / plane) % d.cout] += g;
    }
    let (xd, wd, gd) = (x.data(), weight.data(), grad.data());
    conv_taps(&d, spec, |o, i, w| {
        gx[i] += gd[o] * wd[w];
        gw[w] += gd[o] * xd[i];
    });
    Ok(vec![
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(vec![d.cout], gb)?,
    ])
}

fn bn_dims(x: &Tensor, gamma: &Tensor) -> Result<(usize, usize, usize)> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape(format!(
            "batchnorm2d expects [B,C,H,W], got {:?}",
            x.shape()
        )));
    };
    if gamma.len() != c {
        return Err(Error::shape(format!(
            "batchnorm2d affine has {} entries for {c} channels",
            gamma.len()
        )));
    }
    Ok((b, c, h * w))
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub fn batch_channel_stats(x: &Tensor) -> Result<RunningStats> {
    let &[b, c, h, w] = x.shape() else {
        return Err(Error::shape(format!(
            "batch statistics expect [B,C,H,W], got {:?}",
            x.shape()
        )));
    };
    let hw = h * w;
    let n = (b * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for (ci, m) in mean.iter_mut().enumerate() {
            let base = (bi * c + ci) * hw;
            *m += x.data()[base..base + hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            var[ci] += x.data()[base..base + hw]
                .iter()
                .map(|v| (v - mean[ci]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    Ok(RunningStats { mean, var })
}

fn batchnorm2d(x: &Tensor, gamma: &Tensor, beta: &Tensor, running: Option<&RunningStats>) -> Result<Tensor> {
    let (b, c, hw) = bn_dims(x, gamma)?;
    if beta.len() != c {
        return Err(Error::shape("batchnorm2d beta length"));
    }
    let owned;
    let stats = match running {
        Some(s) => s,
        None => {
            owned = batch_channel_stats(x)?;
            &owned
        }
    };
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let inv = 1.0 / (stats.var[ci] + BATCHNORM_EPS).sqrt();
            let base = (bi * c + ci) * hw;
            for (o, v) in out[base..base + hw].iter_mut().zip(&x.data()[base..base + hw]) {
                *o = gamma.data()[ci] * (v - stats.mean[ci]) * inv + beta.data()[ci];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn batchnorm2d_backward(
    x: &Tensor,
    gamma: &Tensor,
    grad: &Tensor,
    running: Option<&RunningStats>,
) -> Result<Vec<Tensor>> {
    let (b, c, hw) = bn_dims(x, gamma)?;
    let batch_stats;
    let stats = match running {
        Some(s) => s,
        None => {
            batch_stats = batch_channel_stats(x)?;
            &batch_stats
        }
    };
    let n = (b * hw) as f64;
    let mut gx = vec![0.0; x.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for ci in 0..c {
        let inv = 1.0 / (stats.var[ci] + BATCHNORM_EPS).sqrt();
        let g = gamma.data()[ci];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                let xhat = (x.data()[i] - stats.mean[ci]) * inv;
                let dy = grad.data()[i];
                ggamma[ci] += dy * xhat;
                gbeta[ci] += dy;
                sum_dxhat += dy * g;
                sum_dxhat_xhat += dy * g * xhat;
            }
        }
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            let span = base..base + hw;
            for ((gxi, dy), xi) in gx[span.clone()]
                .iter_mut()
                .zip(&grad.data()[span.clone()])
                .zip(&x.data()[span])
            {
                let dxhat = dy * g;
                *gxi = if running.is_some() {
                    dxhat * inv
                } else {
                    let xhat = (xi - stats.mean[ci]) * inv;
                    inv / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
                };
            }
        }
    }
    Ok(vec![
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(gamma.shape().to_vec(), ggamma)?,
        Tensor::new(gamma.shape().to_vec(), gbeta)?,
    ])
}

fn composite_inputs(sigma: &Tensor, rgb: &Tensor, layout: &RayLayout) -> Result<usize> {
    let p = sigma.len();
    let shape_ok = matches!(sigma.shape(), [_] | [_, 1]) && rgb.shape() == [p, 3];
    if !shape_ok {
        return Err(Error::shape(format!(
            "composite expects sigma [P,1] and rgb [P,3], got {:?} and {:?}",
            sigma.shape(),
            rgb.shape()
        )));
    }
    for span in &layout.rays {
        if span.rows.len() != span.deltas.len() {
            return Err(Error::contract("composite span rows/deltas length mismatch"));
        }
        if span.rows.iter().any(|&r| r >= p) {
            return Err(Error::contract("composite span row out of range"));
        }
    }
    Ok(p)
}

fn composite_forward(sigma: &Tensor, rgb: &Tensor, layout: &RayLayout) -> Result<Tensor> {
    composite_inputs(sigma, rgb, layout)?;
    let mut out = Vec::with_capacity(layout.rays.len() * 3);
    let mut sig = Vec::new();
    let mut weights = Vec::new();
    for span in &layout.rays {
        sig.clear();
        sig.extend(span.rows.iter().map(|&r| sigma.data()[r]));
        weights.resize(sig.len(), 0.0);
        let t_final = transmittance_weights(&sig, &span.deltas, &mut weights);
        for ch in 0..3 {
            let mut acc = t_final * layout.background[ch];
            for (&r, &w) in span.rows.iter().zip(&weights) {
                acc += w * rgb.data()[r * 3 + ch];
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![layout.rays.len(), 3], out)
}

fn composite_backward(sigma: &Tensor, rgb: &Tensor, grad: &Tensor, layout: &RayLayout) -> Result<Vec<Tensor>> {
    let p = composite_inputs(sigma, rgb, layout)?;
    let mut gsigma = vec![0.0; p];
    let mut grgb = vec![0.0; p * 3];
    let mut sig = Vec::new();
    let mut weights = Vec::new();
    for (ray, span) in layout.rays.iter().enumerate() {
        let g = &grad.data()[ray * 3..ray * 3 + 3];
        sig.clear();
        sig.extend(span.rows.iter().map(|&r| sigma.data()[r]));
        weights.resize(sig.len(), 0.0);
        let t_final = transmittance_weights(&sig, &span.deltas, &mut weights);
        // suffix = Σ_{i>k} w_i (c_i·g) + T_final (bg·g), walked back to front
        let mut suffix: f64 = (0..3).map(|ch| t_final * layout.background[ch] * g[ch]).sum();
        let mut t_next = t_final;
        for k in (0..span.rows.len()).rev() {
            let r = span.rows[k];
            let c = &rgb.data()[r * 3..r * 3 + 3];
            let cg: f64 = (0..3).map(|ch| c[ch] * g[ch]).sum();
            gsigma[r] += span.deltas[k] * (t_next * cg - suffix);
            for ch in 0..3 {
                grgb[r * 3 + ch] += weights[k] * g[ch];
            }
            suffix += weights[k] * cg;
            // T_k = T_{k+1} + w_k
            t_next += weights[k];
        }
    }
    Ok(vec![
        Tensor::new(sigma.shape().to_vec(), gsigma)?,
        Tensor::new(rgb.shape().to_vec(), grgb)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let out = forward_op(&Op::Relu, &[&t(&[3], &[-1.0, 0.0, 2.0])]).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_of_ones() {
        let a = Tensor::ones(vec![2, 3]);
        let b = Tensor::ones(vec![3, 1]);
        let out = forward_op(&Op::MatMul, &[&a, &b]).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[3.0, 3.0]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let out = forward_op(&Op::Softplus, &[&Tensor::scalar(0.0)]).unwrap();
        assert!((out.item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_shape_error() {
        let a = Tensor::ones(vec![2, 3]);
        let b = Tensor::ones(vec![2, 1]);
        assert!(matches!(forward_op(&Op::MatMul, &[&a, &b]), Err(Error::Shape(_))));
        assert!(matches!(
            forward_op(&Op::Add, &[&a, &Tensor::ones(vec![4])]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn overflow_is_numerics_error() {
        let r = forward_op(&Op::Exp, &[&Tensor::scalar(1000.0)]);
        assert!(matches!(r, Err(Error::Numerics(_))));
    }

    #[test]
    fn row_broadcast_add() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[1, 2], &[10.0, 20.0]);
        let out = forward_op(&Op::Add, &[&a, &b]).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0, 13.0, 24.0]);
        let g = Tensor::ones(vec![2, 2]);
        let grads = backward_op(&Op::Add, &[&a, &b], &out, &g).unwrap();
        assert_eq!(grads[1].data(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        let c = forward_op(&Op::Concat { axis: 1 }, &[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = forward_op(
            &Op::Slice {
                axis: 1,
                start: 2,
                end: 3,
            },
            &[&c],
        )
        .unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 1, 1], &[2.0]);
        let b = t(&[1], &[0.5]);
        let out = forward_op(&Op::Conv2d(Conv2dSpec { stride: 1, pad: 0 }), &[&x, &w, &b]).unwrap();
        assert_eq!(out.data(), &[2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn batchnorm_train_normalizes_channels() {
        let x = t(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 6.0]);
        let out = forward_op(
            &Op::BatchNorm2d { running: None },
            &[&x, &Tensor::ones(vec![1]), &Tensor::zeros(vec![1])],
        )
        .unwrap();
        let mean: f64 = out.data().iter().sum::<f64>() / 4.0;
        let var: f64 = out.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
