//! Op kinds with their shape rules, forward kernels and vector-Jacobian
//! products.

use std::fmt;

use super::tensor::{ParamSet, Tensor};

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Unary {
    Identity,
    Tanh,
    Sigmoid,
    Relu,
    Sin,
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Identity => "identity",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Sin => "sin",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Identity => x,
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Sin => x.sin(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Identity => 1.0,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sin => x.cos(),
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

/// Operation recorded at a graph node.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input(String),
    Param(String),
    Const(Tensor),
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    Add,
    Mul,
    Max,
    /// `[.., n] + [n]`
    AddBias,
    Unary(Unary),
    Scale(f64),
    /// Concatenation along the last (depth) axis.
    Concat,
    /// `[N, H, W, C] -> [N, height, width, C]`, zeros split evenly with the
    /// odd cell on the bottom/right.
    ZeroPad {
        height: usize,
        width: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// `[n, d] -> [1, d]`, row `index`.
    SelectRow(usize),
    Reshape(Vec<usize>),
    /// `[N, H, W, C] -> [N*Ho*Wo, kh*kw*C]` with SAME padding.
    Im2Col {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    /// Per-channel normalization over every axis but the last.
    /// Inputs: `x, gamma, beta`.
    BatchNorm {
        eps: f64,
        buffer: String,
    },
    /// 2x2 max pooling with stride 2.
    MaxPool2,
    /// Inputs: logits `[B, K]`, integer labels `[B]`. Output: mean loss `[1]`.
    SoftmaxCrossEntropy,
    Mean,
    /// `[B, K] -> [B]`; not differentiable.
    Argmax,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Max => "max",
            Op::AddBias => "add_bias",
            Op::Unary(u) => u.name(),
            Op::Scale(_) => "scale",
            Op::Concat => "concat",
            Op::ZeroPad { .. } => "zero_pad",
            Op::Slice { .. } => "slice",
            Op::SelectRow(_) => "select_row",
            Op::Reshape(_) => "reshape",
            Op::Im2Col { .. } => "im2col",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MaxPool2 => "max_pool2",
            Op::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Op::Mean => "mean",
            Op::Argmax => "argmax",
        }
    }

    pub fn is_differentiable(&self) -> bool {
        !matches!(self, Op::Argmax)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Op::Input(_) | Op::Param(_) | Op::Const(_))
    }

    fn arity(&self) -> Option<usize> {
        Some(match self {
            Op::Input(_) | Op::Param(_) | Op::Const(_) => 0,
            Op::MatMul | Op::Add | Op::Mul | Op::Max | Op::AddBias => 2,
            Op::SoftmaxCrossEntropy => 2,
            Op::BatchNorm { .. } => 3,
            Op::Concat => return None,
            _ => 1,
        })
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Input(n) => write!(f, "input \"{n}\""),
            Op::Param(n) => write!(f, "param \"{n}\""),
            Op::Const(t) if t.len() == 1 => write!(f, "const {}", t.item()),
            Op::Const(_) => write!(f, "const"),
            Op::Scale(s) => write!(f, "scale {s}"),
            Op::ZeroPad { height, width } => write!(f, "zero_pad {height}x{width}"),
            Op::Slice { axis, start, len } => write!(f, "slice axis={axis} [{start}..{}]", start + len),
            Op::SelectRow(i) => write!(f, "select_row {i}"),
            Op::Reshape(s) => write!(f, "reshape {s:?}"),
            Op::Im2Col { kernel, stride } => write!(
                f,
                "im2col k={}x{} s={}x{}",
                kernel.0, kernel.1, stride.0, stride.1
            ),
            Op::BatchNorm { eps, buffer } => write!(f, "batch_norm eps={eps} \"{buffer}\""),
            other => f.write_str(other.name()),
        }
    }
}

pub(crate) fn conv_out(extent: usize, stride: usize) -> usize {
    extent.div_ceil(stride)
}

fn same_pad(extent: usize, kernel: usize, stride: usize) -> usize {
    let out = conv_out(extent, stride);
    ((out - 1) * stride + kernel).saturating_sub(extent) / 2
}

/// Output shape of `op` applied to inputs of the given shapes.
pub(crate) fn infer_shape(op: &Op, shapes: &[&[usize]]) -> Result<Vec<usize>, String> {
    if let Some(n) = op.arity() {
        if shapes.len() != n {
            return Err(format!("expects {n} inputs, got {}", shapes.len()));
        }
    }
    let rank2 = |s: &[usize], what: &str| -> Result<(), String> {
        if s.len() != 2 {
            Err(format!("{what} must be rank 2, got {s:?}"))
        } else {
            Ok(())
        }
    };
    let rank4 = |s: &[usize]| -> Result<(), String> {
        if s.len() != 4 {
            Err(format!("expects [N, H, W, C], got {s:?}"))
        } else {
            Ok(())
        }
    };
    match op {
        Op::Input(_) | Op::Param(_) => Err("leaf shapes are declared, not inferred".into()),
        Op::Const(t) => Ok(t.shape().to_vec()),
        Op::MatMul => {
            let (a, b) = (shapes[0], shapes[1]);
            rank2(a, "lhs")?;
            rank2(b, "rhs")?;
            if a[1] != b[0] {
                return Err(format!("inner extents differ: {a:?} x {b:?}"));
            }
            Ok(vec![a[0], b[1]])
        }
        Op::Add | Op::Mul | Op::Max => {
            if shapes[0] != shapes[1] {
                return Err(format!("operand shapes differ: {:?} vs {:?}", shapes[0], shapes[1]));
            }
            Ok(shapes[0].to_vec())
        }
        Op::AddBias => {
            let (x, b) = (shapes[0], shapes[1]);
            if b.len() != 1 || x.last() != b.first() {
                return Err(format!("bias {b:?} does not match last axis of {x:?}"));
            }
            Ok(x.to_vec())
        }
        Op::Unary(_) | Op::Scale(_) => Ok(shapes[0].to_vec()),
        Op::Concat => {
            let first = *shapes.first().ok_or("needs at least one input")?;
            let rank = first.len();
            let mut depth = 0;
            for s in shapes {
                if s.len() != rank || s[..rank - 1] != first[..rank - 1] {
                    return Err(format!("leading extents differ: {first:?} vs {s:?}"));
                }
                depth += s[rank - 1];
            }
            let mut out = first.to_vec();
            out[rank - 1] = depth;
            Ok(out)
        }
        Op::ZeroPad { height, width } => {
            let s = shapes[0];
            rank4(s)?;
            if *height < s[1] || *width < s[2] {
                return Err(format!("cannot pad {s:?} down to {height}x{width}"));
            }
            Ok(vec![s[0], *height, *width, s[3]])
        }
        Op::Slice { axis, start, len } => {
            let s = shapes[0];
            if *axis >= s.len() || *len == 0 || start + len > s[*axis] {
                return Err(format!("slice [{start}..{}] out of range on axis {axis} of {s:?}", start + len));
            }
            let mut out = s.to_vec();
            out[*axis] = *len;
            Ok(out)
        }
        Op::SelectRow(i) => {
            let s = shapes[0];
            rank2(s, "table")?;
            if *i >= s[0] {
                return Err(format!("row {i} out of range for {s:?}"));
            }
            Ok(vec![1, s[1]])
        }
        Op::Reshape(target) => {
            super::tensor::check_shape(target).map_err(|e| e.to_string())?;
            let from: usize = shapes[0].iter().product();
            let to: usize = target.iter().product();
            if from != to {
                return Err(format!("cannot reshape {:?} into {target:?}", shapes[0]));
            }
            Ok(target.clone())
        }
        Op::Im2Col { kernel, stride } => {
            let s = shapes[0];
            rank4(s)?;
            if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                return Err("kernel and stride extents must be positive".into());
            }
            let ho = conv_out(s[1], stride.0);
            let wo = conv_out(s[2], stride.1);
            Ok(vec![s[0] * ho * wo, kernel.0 * kernel.1 * s[3]])
        }
        Op::BatchNorm { .. } => {
            let (x, g, b) = (shapes[0], shapes[1], shapes[2]);
            let c = *x.last().unwrap();
            if g != [c] || b != [c] {
                return Err(format!("gamma {g:?} / beta {b:?} must be [{c}]"));
            }
            Ok(x.to_vec())
        }
        Op::MaxPool2 => {
            let s = shapes[0];
            rank4(s)?;
            Ok(vec![s[0], s[1].div_ceil(2), s[2].div_ceil(2), s[3]])
        }
        Op::SoftmaxCrossEntropy => {
            let (l, t) = (shapes[0], shapes[1]);
            rank2(l, "logits")?;
            if t != [l[0]] {
                return Err(format!("labels {t:?} must be [{}]", l[0]));
            }
            Ok(vec![1])
        }
        Op::Mean => Ok(vec![1]),
        Op::Argmax => {
            rank2(shapes[0], "scores")?;
            Ok(vec![shapes[0][0]])
        }
    }
}

/// `c = op(a) * op(b)` (optionally accumulating into `c`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    // Logical a is m x k. Stored row-major as m x k, or k x m when transposed.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the logical extents,
    // and the strides address exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&v| v - lse).collect()
}

fn label_at(t: f64, classes: usize) -> Result<usize, String> {
    if t < 0.0 || t.fract() != 0.0 || t as usize >= classes {
        return Err(format!("label {t} is not a class index below {classes}"));
    }
    Ok(t as usize)
}

/// Normalization running statistics are stored as `[2, C]`: means, then variances.
pub(crate) fn stats_tensor(mean: &[f64], var: &[f64]) -> Tensor {
    let mut data = mean.to_vec();
    data.extend_from_slice(var);
    Tensor::from_parts(vec![2, mean.len()], data)
}

pub(crate) struct ForwardCtx<'a> {
    pub train: bool,
    pub buffers: Option<&'a ParamSet>,
}

fn channel_stats(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

fn norm_stats<'a>(
    buffer: &str,
    x: &[f64],
    c: usize,
    ctx: &ForwardCtx<'a>,
) -> Result<(Vec<f64>, Vec<f64>), String> {
    if ctx.train {
        return Ok(channel_stats(x, c));
    }
    let stats = ctx
        .buffers
        .and_then(|b| b.get(buffer))
        .ok_or_else(|| format!("running statistics \"{buffer}\" missing in eval mode"))?;
    if stats.shape() != [2, c] {
        return Err(format!("running statistics \"{buffer}\" have shape {:?}", stats.shape()));
    }
    Ok((stats.data()[..c].to_vec(), stats.data()[c..].to_vec()))
}

/// Evaluates a non-leaf op. Returns the output and, for normalization in
/// training mode, the batch statistics.
pub(crate) fn forward(
    op: &Op,
    inputs: &[&Tensor],
    out_shape: &[usize],
    ctx: &ForwardCtx<'_>,
) -> Result<(Tensor, Option<Tensor>), String> {
    let out_len: usize = out_shape.iter().product();
    let shape = out_shape.to_vec();
    let data = match op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => unreachable!("leaves are bound by the graph"),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
            c
        }
        Op::Add => zip(inputs[0], inputs[1], |a, b| a + b),
        Op::Mul => zip(inputs[0], inputs[1], |a, b| a * b),
        Op::Max => zip(inputs[0], inputs[1], f64::max),
        Op::AddBias => {
            let b = inputs[1].data();
            let mut out = inputs[0].data().to_vec();
            for row in out.chunks_exact_mut(b.len()) {
                for (v, bias) in row.iter_mut().zip(b) {
                    *v += bias;
                }
            }
            out
        }
        Op::Unary(u) => inputs[0].data().iter().map(|&v| u.apply(v)).collect(),
        Op::Scale(s) => inputs[0].data().iter().map(|&v| v * s).collect(),
        Op::Concat => {
            let depths: Vec<usize> = inputs.iter().map(|t| *t.shape().last().unwrap()).collect();
            let rows = inputs[0].len() / depths[0];
            let mut out = Vec::with_capacity(out_len);
            for r in 0..rows {
                for (t, &d) in inputs.iter().zip(&depths) {
                    out.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
                }
            }
            out
        }
        Op::ZeroPad { height, width } => {
            let s = inputs[0].shape();
            let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
            let (top, left) = ((height - h) / 2, (width - w) / 2);
            let mut out = vec![0.0; out_len];
            let src = inputs[0].data();
            for b in 0..n {
                for y in 0..h {
                    let from = ((b * h + y) * w) * c;
                    let to = ((b * height + y + top) * width + left) * c;
                    out[to..to + w * c].copy_from_slice(&src[from..from + w * c]);
                }
            }
            out
        }
        Op::Slice { axis, start, len } => {
            let s = inputs[0].shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let src = inputs[0].data();
            let mut out = Vec::with_capacity(out_len);
            for o in 0..outer {
                let base = (o * s[*axis] + start) * inner;
                out.extend_from_slice(&src[base..base + len * inner]);
            }
            out
        }
        Op::SelectRow(i) => {
            let d = inputs[0].shape()[1];
            inputs[0].data()[i * d..(i + 1) * d].to_vec()
        }
        Op::Reshape(_) => inputs[0].data().to_vec(),
        Op::Im2Col { kernel, stride } => im2col(inputs[0], *kernel, *stride, out_len),
        Op::BatchNorm { eps, buffer } => {
            let x = inputs[0].data();
            let (gamma, beta) = (inputs[1].data(), inputs[2].data());
            let c = gamma.len();
            let (mean, var) = norm_stats(buffer, x, c, ctx)?;
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks_exact(c) {
                for ch in 0..c {
                    out.push(gamma[ch] * (row[ch] - mean[ch]) * inv[ch] + beta[ch]);
                }
            }
            let stats = ctx.train.then(|| stats_tensor(&mean, &var));
            return Ok((Tensor::from_parts(shape, out), stats));
        }
        Op::MaxPool2 => {
            let (out, _) = max_pool2(inputs[0], out_shape);
            out
        }
        Op::SoftmaxCrossEntropy => {
            let (logits, labels) = (inputs[0], inputs[1]);
            let k = logits.shape()[1];
            let mut total = 0.0;
            for (row, &t) in logits.data().chunks_exact(k).zip(labels.data()) {
                let y = label_at(t, k)?;
                total -= log_softmax_row(row)[y];
            }
            vec![total / labels.len() as f64]
        }
        Op::Mean => vec![inputs[0].sum() / inputs[0].len() as f64],
        Op::Argmax => {
            let k = inputs[0].shape()[1];
            inputs[0]
                .data()
                .chunks_exact(k)
                .map(|row| {
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    best as f64
                })
                .collect()
        }
    };
    debug_assert_eq!(data.len(), out_len, "{} produced wrong length", op.name());
    Ok((Tensor::from_parts(shape, data), None))
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn im2col(x: &Tensor, kernel: (usize, usize), stride: (usize, usize), out_len: usize) -> Vec<f64> {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ho, wo) = (conv_out(h, sh), conv_out(w, sw));
    let (pt, pl) = (same_pad(h, kh, sh), same_pad(w, kw, sw));
    let src = x.data();
    let mut out = vec![0.0; out_len];
    let cols = kh * kw * c;
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * cols;
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * sw + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let from = ((b * h + iy as usize) * w + ix as usize) * c;
                        let to = row + (ky * kw + kx) * c;
                        out[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im(
    grad: &Tensor,
    in_shape: &[usize],
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Vec<f64> {
    let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ho, wo) = (conv_out(h, sh), conv_out(w, sw));
    let (pt, pl) = (same_pad(h, kh, sh), same_pad(w, kw, sw));
    let g = grad.data();
    let mut out = vec![0.0; n * h * w * c];
    let cols = kh * kw * c;
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * cols;
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * sw + kx) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let to = ((b * h + iy as usize) * w + ix as usize) * c;
                        let from = row + (ky * kw + kx) * c;
                        for ch in 0..c {
                            out[to + ch] += g[from + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Pooled values and, per output element, the flat index of the chosen input.
fn max_pool2(x: &Tensor, out_shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (out_shape[1], out_shape[2]);
    let src = x.data();
    let mut out = Vec::with_capacity(n * ho * wo * c);
    let mut arg = Vec::with_capacity(n * ho * wo * c);
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best_ix = usize::MAX;
                    let mut best = f64::NEG_INFINITY;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let ix = ((b * h + y) * w + xx) * c + ch;
                            if best_ix == usize::MAX || src[ix] > best {
                                best = src[ix];
                                best_ix = ix;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_ix);
                }
            }
        }
    }
    (out, arg)
}

/// Vector-Jacobian product: gradients for each input given the upstream
/// gradient of the output. Entries are `None` where `needs[i]` is false.
pub(crate) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    upstream: &Tensor,
    needs: &[bool],
    ctx: &ForwardCtx<'_>,
) -> Result<Vec<Option<Tensor>>, String> {
    let g = upstream.data();
    let like = |i: usize, data: Vec<f64>| Some(Tensor::from_parts(inputs[i].shape().to_vec(), data));
    let mut grads: Vec<Option<Tensor>> = vec![None; inputs.len()];
    match op {
        Op::Input(_) | Op::Param(_) | Op::Const(_) => {}
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if needs[0] {
                let mut da = vec![0.0; m * k];
                gemm(m, n, k, g, false, b.data(), true, &mut da, false);
                grads[0] = like(0, da);
            }
            if needs[1] {
                let mut db = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, g, false, &mut db, false);
                grads[1] = like(1, db);
            }
        }
        Op::Add => {
            for (i, slot) in grads.iter_mut().enumerate() {
                if needs[i] {
                    *slot = like(i, g.to_vec());
                }
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            if needs[0] {
                grads[0] = like(0, g.iter().zip(b).map(|(u, y)| u * y).collect());
            }
            if needs[1] {
                grads[1] = like(1, g.iter().zip(a).map(|(u, x)| u * x).collect());
            }
        }
        Op::Max => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            // Ties route the whole gradient to the first operand.
            if needs[0] {
                grads[0] = like(0, (0..g.len()).map(|i| if a[i] >= b[i] { g[i] } else { 0.0 }).collect());
            }
            if needs[1] {
                grads[1] = like(1, (0..g.len()).map(|i| if a[i] >= b[i] { 0.0 } else { g[i] }).collect());
            }
        }
        Op::AddBias => {
            if needs[0] {
                grads[0] = like(0, g.to_vec());
            }
            if needs[1] {
                let n = inputs[1].len();
                let mut db = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    for (acc, v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                grads[1] = like(1, db);
            }
        }
        Op::Unary(u) => {
            let (x, y) = (inputs[0].data(), output.data());
            grads[0] = like(0, (0..g.len()).map(|i| g[i] * u.derivative(x[i], y[i])).collect());
        }
        Op::Scale(s) => grads[0] = like(0, g.iter().map(|v| v * s).collect()),
        Op::Concat => {
            let depths: Vec<usize> = inputs.iter().map(|t| *t.shape().last().unwrap()).collect();
            let total: usize = depths.iter().sum();
            let rows = g.len() / total;
            let mut parts: Vec<Vec<f64>> = inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
            for r in 0..rows {
                let mut off = r * total;
                for (part, &d) in parts.iter_mut().zip(&depths) {
                    part.extend_from_slice(&g[off..off + d]);
                    off += d;
                }
            }
            for (i, part) in parts.into_iter().enumerate() {
                if needs[i] {
                    grads[i] = like(i, part);
                }
            }
        }
        Op::ZeroPad { height, width } => {
            let s = inputs[0].shape();
            let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
            let (top, left) = ((height - h) / 2, (width - w) / 2);
            let mut dx = Vec::with_capacity(inputs[0].len());
            for b in 0..n {
                for y in 0..h {
                    let from = ((b * height + y + top) * width + left) * c;
                    dx.extend_from_slice(&g[from..from + w * c]);
                }
            }
            grads[0] = like(0, dx);
        }
        Op::Slice { axis, start, len } => {
            let s = inputs[0].shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut dx = vec![0.0; inputs[0].len()];
            for o in 0..outer {
                let to = (o * s[*axis] + start) * inner;
                let from = o * len * inner;
                dx[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
            }
            grads[0] = like(0, dx);
        }
        Op::SelectRow(i) => {
            let d = inputs[0].shape()[1];
            let mut dx = vec![0.0; inputs[0].len()];
            dx[i * d..(i + 1) * d].copy_from_slice(g);
            grads[0] = like(0, dx);
        }
        Op::Reshape(_) => grads[0] = like(0, g.to_vec()),
        Op::Im2Col { kernel, stride } => {
            grads[0] = like(0, col2im(upstream, inputs[0].shape(), *kernel, *stride));
        }
        Op::BatchNorm { eps, buffer } => {
            let x = inputs[0].data();
            let gamma = inputs[1].data();
            let c = gamma.len();
            let m = (x.len() / c) as f64;
            let (mean, var) = norm_stats(buffer, x, c, ctx)?;
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut sum_dxhat = vec![0.0; c];
            let mut sum_dxhat_xhat = vec![0.0; c];
            for (row, grow) in x.chunks_exact(c).zip(g.chunks_exact(c)) {
                for ch in 0..c {
                    let xhat = (row[ch] - mean[ch]) * inv[ch];
                    dgamma[ch] += grow[ch] * xhat;
                    dbeta[ch] += grow[ch];
                    let dxhat = grow[ch] * gamma[ch];
                    sum_dxhat[ch] += dxhat;
                    sum_dxhat_xhat[ch] += dxhat * xhat;
                }
            }
            if needs[0] {
                let mut dx = Vec::with_capacity(x.len());
                for (row, grow) in x.chunks_exact(c).zip(g.chunks_exact(c)) {
                    for ch in 0..c {
                        let dxhat = grow[ch] * gamma[ch];
                        if ctx.train {
                            let xhat = (row[ch] - mean[ch]) * inv[ch];
                            dx.push(
                                inv[ch] / m * (m * dxhat - sum_dxhat[ch] - xhat * sum_dxhat_xhat[ch]),
                            );
                        } else {
                            dx.push(dxhat * inv[ch]);
                        }
                    }
                }
                grads[0] = like(0, dx);
            }
            if needs[1] {
                grads[1] = like(1, dgamma);
            }
            if needs[2] {
                grads[2] = like(2, dbeta);
            }
        }
        Op::MaxPool2 => {
            let (_, arg) = max_pool2(inputs[0], output.shape());
            let mut dx = vec![0.0; inputs[0].len()];
            for (&ix, v) in arg.iter().zip(g) {
                dx[ix] += v;
            }
            grads[0] = like(0, dx);
        }
        Op::SoftmaxCrossEntropy => {
            if needs[0] {
                let (logits, labels) = (inputs[0], inputs[1]);
                let k = logits.shape()[1];
                let scale = g[0] / labels.len() as f64;
                let mut dl = Vec::with_capacity(logits.len());
                for (row, &t) in logits.data().chunks_exact(k).zip(labels.data()) {
                    let y = label_at(t, k)?;
                    let p = softmax_row(row);
                    for (j, pj) in p.into_iter().enumerate() {
                        dl.push(scale * (pj - if j == y { 1.0 } else { 0.0 }));
                    }
                }
                grads[0] = like(0, dl);
            }
            // Labels are piecewise constant: zero gradient.
            if needs[1] {
                grads[1] = like(1, vec![0.0; inputs[1].len()]);
            }
        }
        Op::Mean => {
            let n = inputs[0].len();
            grads[0] = like(0, vec![g[0] / n as f64; n]);
        }
        Op::Argmax => return Err("argmax is not differentiable".into()),
    }
    Ok(grads)
}
