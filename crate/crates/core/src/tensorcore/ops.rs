//! Forward and vector-Jacobian kernels for every differentiable op.
//!
//! Image batches are laid out `[N, C, H, W]`; feature batches `[N, D]`.

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Batch-norm statistics source.
#[derive(Clone, Debug, PartialEq)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with frozen running statistics.
    Eval {
        running_mean: Vec<f64>,
        running_var: Vec<f64>,
    },
}

pub const BN_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// 2-D transpose.
    Transpose,
    /// Inputs `x [N,C,H,W]`, `w [O,C,kh,kw]`, `b [O]`.
    Conv2d { stride: usize, pad: usize },
    /// Elementwise; the right operand may be a trailing-dims suffix of the left.
    Add,
    Mul,
    Relu,
    Sigmoid,
    /// Inputs `x [N,C,...]`, `gamma [C]`, `beta [C]`; statistics per channel (axis 1).
    BatchNorm { mode: BnMode, eps: f64 },
    /// `[N,C,H,W] -> [N,C]`
    GlobalAvgPool,
    /// Unit-normalizes along the last axis, dividing by `max(norm, eps)`.
    L2Normalize { eps: f64 },
    Concat { axis: usize },
    /// Sum of all elements to a scalar.
    Sum,
    SumLastAxis,
    Scale(f64),
    /// Row-wise log-sum-exp of a 2-D tensor, max-shifted.
    LogSumExp,
    /// Picks one column per row of a 2-D tensor.
    PickColumns(Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::BatchNorm { .. } => "batchnorm",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Concat { .. } => "concat",
            Op::Sum => "sum",
            Op::SumLastAxis => "sum_last_axis",
            Op::Scale(_) => "scale",
            Op::LogSumExp => "logsumexp",
            Op::PickColumns(_) => "pick_columns",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::MatMul | Op::Add | Op::Mul => Some(2),
            Op::Conv2d { .. } | Op::BatchNorm { .. } => Some(3),
            Op::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Evaluates `op` on `inputs`.
pub fn forward_op(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = op.arity() {
        if inputs.len() != n {
            return Err(Error::shape(format!(
                "{} expects {n} inputs, got {}",
                op.name(),
                inputs.len()
            )));
        }
    }
    for (i, t) in inputs.iter().enumerate() {
        t.check_finite(&format!("{} input {i}", op.name()))?;
    }
    let out = match op {
        Op::Leaf => return Err(Error::contract("leaf nodes have no forward kernel")),
        Op::MatMul => matmul(inputs[0], inputs[1])?,
        Op::Transpose => transpose(inputs[0])?,
        Op::Conv2d { stride, pad } => conv2d(inputs[0], inputs[1], inputs[2], *stride, *pad)?,
        Op::Add => broadcast_binary(inputs[0], inputs[1], "add", |a, b| a + b)?,
        Op::Mul => broadcast_binary(inputs[0], inputs[1], "mul", |a, b| a * b)?,
        Op::Relu => inputs[0].map(|v| v.max(0.0)),
        Op::Sigmoid => inputs[0].map(sigmoid),
        Op::BatchNorm { mode, eps } => batch_norm(inputs[0], inputs[1], inputs[2], mode, *eps)?,
        Op::GlobalAvgPool => global_avg_pool(inputs[0])?,
        Op::L2Normalize { eps } => l2_normalize(inputs[0], *eps)?,
        Op::Concat { axis } => concat(inputs, *axis)?,
        Op::Sum => Tensor::scalar(inputs[0].sum()),
        Op::SumLastAxis => sum_last_axis(inputs[0])?,
        Op::Scale(c) => inputs[0].map(|v| v * c),
        Op::LogSumExp => logsumexp_rows(inputs[0])?,
        Op::PickColumns(idx) => pick_columns(inputs[0], idx)?,
    };
    out.check_finite(op.name())?;
    Ok(out)
}

/// Vector-Jacobian product: given the upstream gradient of the output,
/// returns the gradient for every input flagged in `needs`.
pub fn backward_op(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    grad: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let mut out: Vec<Option<Tensor>> = vec![None; inputs.len()];
    match op {
        Op::Leaf => {}
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if needs[0] {
                out[0] = Some(matmul(grad, &transpose(b)?)?);
            }
            if needs[1] {
                out[1] = Some(matmul(&transpose(a)?, grad)?);
            }
        }
        Op::Transpose => out[0] = Some(transpose(grad)?),
        Op::Conv2d { stride, pad } => {
            let (dx, dw, db) = conv2d_backward(inputs[0], inputs[1], grad, *stride, *pad, needs[0]);
            out[0] = dx;
            if needs[1] {
                out[1] = Some(dw);
            }
            if needs[2] {
                out[2] = Some(db);
            }
        }
        Op::Add => {
            if needs[0] {
                out[0] = Some(grad.clone());
            }
            if needs[1] {
                out[1] = Some(reduce_to_suffix(grad, inputs[1].dims()));
            }
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if needs[0] {
                out[0] = Some(broadcast_binary(grad, b, "mul", |g, y| g * y)?);
            }
            if needs[1] {
                let full = Tensor::from_parts(
                    grad.dims().to_vec(),
                    grad.data().iter().zip(a.data()).map(|(g, x)| g * x).collect(),
                );
                out[1] = Some(reduce_to_suffix(&full, b.dims()));
            }
        }
        Op::Relu => {
            let data = grad
                .data()
                .iter()
                .zip(inputs[0].data())
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect();
            out[0] = Some(Tensor::from_parts(grad.dims().to_vec(), data));
        }
        Op::Sigmoid => {
            let data = grad
                .data()
                .iter()
                .zip(output.data())
                .map(|(&g, &y)| g * y * (1.0 - y))
                .collect();
            out[0] = Some(Tensor::from_parts(grad.dims().to_vec(), data));
        }
        Op::BatchNorm { mode, eps } => {
            let (dx, dgamma, dbeta) = batch_norm_backward(inputs[0], inputs[1], grad, mode, *eps);
            out[0] = Some(dx);
            out[1] = Some(dgamma);
            out[2] = Some(dbeta);
        }
        Op::GlobalAvgPool => {
            let d = inputs[0].dims();
            let spatial = d[2] * d[3];
            let scale = 1.0 / spatial as f64;
            let mut data = Vec::with_capacity(inputs[0].numel());
            for &g in grad.data() {
                data.extend(std::iter::repeat_n(g * scale, spatial));
            }
            out[0] = Some(Tensor::from_parts(d.to_vec(), data));
        }
        Op::L2Normalize { eps } => {
            let x = inputs[0];
            let n = last_dim(x);
            let mut data = vec![0.0; x.numel()];
            for r in 0..x.numel() / n.max(1) {
                let xs = &x.data()[r * n..(r + 1) * n];
                let ys = &output.data()[r * n..(r + 1) * n];
                let gs = &grad.data()[r * n..(r + 1) * n];
                let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dst = &mut data[r * n..(r + 1) * n];
                if norm > *eps {
                    let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                    for ((d, &g), &y) in dst.iter_mut().zip(gs).zip(ys) {
                        *d = (g - y * dot) / norm;
                    }
                } else {
                    for (d, &g) in dst.iter_mut().zip(gs) {
                        *d = g / eps;
                    }
                }
            }
            out[0] = Some(Tensor::from_parts(x.dims().to_vec(), data));
        }
        Op::Concat { axis } => {
            let pieces = split_along(grad, inputs, *axis);
            for (slot, piece) in out.iter_mut().zip(pieces) {
                *slot = Some(piece);
            }
        }
        Op::Sum => {
            let g = grad.data()[0];
            out[0] = Some(Tensor::full(inputs[0].dims(), g));
        }
        Op::SumLastAxis => {
            let n = last_dim(inputs[0]);
            let mut data = Vec::with_capacity(inputs[0].numel());
            for &g in grad.data() {
                data.extend(std::iter::repeat_n(g, n));
            }
            out[0] = Some(Tensor::from_parts(inputs[0].dims().to_vec(), data));
        }
        Op::Scale(c) => out[0] = Some(grad.map(|g| g * c)),
        Op::LogSumExp => {
            let x = inputs[0];
            let cols = x.dims()[1];
            let mut data = vec![0.0; x.numel()];
            for r in 0..x.dims()[0] {
                let lse = output.data()[r];
                let g = grad.data()[r];
                for c in 0..cols {
                    data[r * cols + c] = g * (x.data()[r * cols + c] - lse).exp();
                }
            }
            out[0] = Some(Tensor::from_parts(x.dims().to_vec(), data));
        }
        Op::PickColumns(idx) => {
            let x = inputs[0];
            let cols = x.dims()[1];
            let mut data = vec![0.0; x.numel()];
            for (r, &c) in idx.iter().enumerate() {
                data[r * cols + c] = grad.data()[r];
            }
            out[0] = Some(Tensor::from_parts(x.dims().to_vec(), data));
        }
    }
    for (slot, need) in out.iter_mut().zip(needs) {
        if !need {
            *slot = None;
        }
    }
    Ok(out)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn last_dim(t: &Tensor) -> usize {
    t.dims().last().copied().unwrap_or(1)
}

fn expect_ndim(t: &Tensor, n: usize, what: &str) -> Result<()> {
    if t.ndim() != n {
        return Err(Error::shape(format!(
            "{what} expects a {n}-D tensor, got {:?}",
            t.dims()
        )));
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_ndim(a, 2, "matmul lhs")?;
    expect_ndim(b, 2, "matmul rhs")?;
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let (k2, n) = (b.dims()[0], b.dims()[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul {:?} x {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_ndim(a, 2, "transpose")?;
    let (m, n) = (a.dims()[0], a.dims()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    what: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (ad, bd) = (a.dims(), b.dims());
    if bd.len() > ad.len() || ad[ad.len() - bd.len()..] != *bd {
        return Err(Error::shape(format!("{what}: {ad:?} with {bd:?}")));
    }
    let period = b.numel();
    let data = if period == 0 {
        Vec::new()
    } else {
        a.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data()[i % period]))
            .collect()
    };
    Ok(Tensor::from_parts(ad.to_vec(), data))
}

fn reduce_to_suffix(grad: &Tensor, dims: &[usize]) -> Tensor {
    let period: usize = dims.iter().product();
    let mut data = vec![0.0; period];
    if period > 0 {
        for (i, &g) in grad.data().iter().enumerate() {
            data[i % period] += g;
        }
    }
    Tensor::from_parts(dims.to_vec(), data)
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    expect_ndim(x, 4, "conv2d input")?;
    expect_ndim(w, 4, "conv2d weight")?;
    let [n, c, h, wd] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
    let [o, wc, kh, kw] = [w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]];
    if wc != c {
        return Err(Error::shape(format!(
            "conv2d: input {:?} has {c} channels, weight {:?} expects {wc}",
            x.dims(),
            w.dims()
        )));
    }
    if b.dims() != [o] {
        return Err(Error::shape(format!(
            "conv2d: bias {:?} for {o} output channels",
            b.dims()
        )));
    }
    let (ho, wo) = match (
        conv_out_extent(h, kh, stride, pad),
        conv_out_extent(wd, kw, stride, pad),
    ) {
        (Some(ho), Some(wo)) => (ho, wo),
        _ => {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {:?}",
                x.dims()
            )))
        }
    };
    let mut out = vec![0.0; n * o * ho * wo];
    let (xd, wdat) = (x.data(), w.data());
    for ni in 0..n {
        for oc in 0..o {
            let base = (ni * o + oc) * ho * wo;
            out[base..base + ho * wo].fill(b.data()[oc]);
            for ci in 0..c {
                let xplane = &xd[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                let kbase = (oc * c + ci) * kh * kw;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wdat[kbase + ki * kw + kj];
                        for oh in 0..ho {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[ih as usize * wd..(ih as usize + 1) * wd];
                            let orow = &mut out[base + oh * wo..base + (oh + 1) * wo];
                            for (ow, ov) in orow.iter_mut().enumerate() {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw >= 0 && iw < wd as isize {
                                    *ov += wv * xrow[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, o, ho, wo], out))
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let [n, c, h, wd] = [x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]];
    let [o, _, kh, kw] = [w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]];
    let (ho, wo) = (grad.dims()[2], grad.dims()[3]);
    let mut dx = if need_dx { vec![0.0; x.numel()] } else { Vec::new() };
    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; o];
    let (xd, wdat, gd) = (x.data(), w.data(), grad.data());
    for ni in 0..n {
        for oc in 0..o {
            let gplane = &gd[(ni * o + oc) * ho * wo..(ni * o + oc + 1) * ho * wo];
            db[oc] += gplane.iter().sum::<f64>();
            for ci in 0..c {
                let xoff = (ni * c + ci) * h * wd;
                let kbase = (oc * c + ci) * kh * kw;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = wdat[kbase + ki * kw + kj];
                        let mut acc = 0.0;
                        for oh in 0..ho {
                            let ih = (oh * stride + ki) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let row = xoff + ih as usize * wd;
                            for ow in 0..wo {
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if iw < 0 || iw >= wd as isize {
                                    continue;
                                }
                                let g = gplane[oh * wo + ow];
                                acc += g * xd[row + iw as usize];
                                if need_dx {
                                    dx[row + iw as usize] += g * wv;
                                }
                            }
                        }
                        dw[kbase + ki * kw + kj] += acc;
                    }
                }
            }
        }
    }
    let dx = need_dx.then(|| Tensor::from_parts(x.dims().to_vec(), dx));
    (
        dx,
        Tensor::from_parts(w.dims().to_vec(), dw),
        Tensor::from_parts(vec![o], db),
    )
}

/// Biased per-channel mean and variance over every axis except 1.
pub fn channel_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let d = x.dims();
    let (n, c) = (d[0], d[1]);
    let inner: usize = d[2..].iter().product();
    let count = (n * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            let off = (ni * c + ci) * inner;
            s += x.data()[off..off + inner].iter().sum::<f64>();
        }
        let m = s / count;
        let mut v = 0.0;
        for ni in 0..n {
            let off = (ni * c + ci) * inner;
            v += x.data()[off..off + inner]
                .iter()
                .map(|&e| (e - m) * (e - m))
                .sum::<f64>();
        }
        mean[ci] = m;
        var[ci] = v / count;
    }
    (mean, var)
}

fn bn_stats(x: &Tensor, mode: &BnMode) -> (Vec<f64>, Vec<f64>) {
    match mode {
        BnMode::Train => channel_stats(x),
        BnMode::Eval {
            running_mean,
            running_var,
        } => (running_mean.clone(), running_var.clone()),
    }
}

fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, mode: &BnMode, eps: f64) -> Result<Tensor> {
    if x.ndim() < 2 {
        return Err(Error::shape(format!("batchnorm on {:?}", x.dims())));
    }
    let c = x.dims()[1];
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::shape(format!(
            "batchnorm: affine params {:?}/{:?} for {c} channels",
            gamma.dims(),
            beta.dims()
        )));
    }
    if let BnMode::Eval {
        running_mean,
        running_var,
    } = mode
    {
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape("batchnorm: running stats length"));
        }
    }
    let (mean, var) = bn_stats(x, mode);
    let inner: usize = x.dims()[2..].iter().product();
    let mut out = x.data().to_vec();
    for (i, v) in out.iter_mut().enumerate() {
        let ci = (i / inner) % c;
        let xhat = (*v - mean[ci]) / (var[ci] + eps).sqrt();
        *v = gamma.data()[ci] * xhat + beta.data()[ci];
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    grad: &Tensor,
    mode: &BnMode,
    eps: f64,
) -> (Tensor, Tensor, Tensor) {
    let d = x.dims();
    let (n, c) = (d[0], d[1]);
    let inner: usize = d[2..].iter().product();
    let count = (n * inner) as f64;
    let (mean, var) = bn_stats(x, mode);
    let mut dx = vec![0.0; x.numel()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ci in 0..c {
        let inv_std = 1.0 / (var[ci] + eps).sqrt();
        let (mut sg, mut sgx) = (0.0, 0.0);
        for ni in 0..n {
            let off = (ni * c + ci) * inner;
            for j in off..off + inner {
                let xhat = (x.data()[j] - mean[ci]) * inv_std;
                sg += grad.data()[j];
                sgx += grad.data()[j] * xhat;
            }
        }
        dgamma[ci] = sgx;
        dbeta[ci] = sg;
        let g = gamma.data()[ci];
        for ni in 0..n {
            let off = (ni * c + ci) * inner;
            for j in off..off + inner {
                dx[j] = match mode {
                    BnMode::Train => {
                        let xhat = (x.data()[j] - mean[ci]) * inv_std;
                        g * inv_std * (grad.data()[j] - sg / count - xhat * sgx / count)
                    }
                    BnMode::Eval { .. } => g * inv_std * grad.data()[j],
                };
            }
        }
    }
    (
        Tensor::from_parts(d.to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    )
}

fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    expect_ndim(x, 4, "global_avg_pool")?;
    let d = x.dims();
    let spatial = d[2] * d[3];
    if spatial == 0 {
        return Err(Error::shape("global_avg_pool over empty spatial extent"));
    }
    let data = x
        .data()
        .chunks(spatial)
        .map(|ch| ch.iter().sum::<f64>() / spatial as f64)
        .collect();
    Ok(Tensor::from_parts(vec![d[0], d[1]], data))
}

fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    if x.ndim() == 0 {
        return Err(Error::shape("l2_normalize on a scalar"));
    }
    let n = last_dim(x);
    let mut out = x.data().to_vec();
    if n > 0 {
        for row in out.chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}

fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat of zero tensors"))?;
    let nd = first.ndim();
    if axis >= nd {
        return Err(Error::shape(format!(
            "concat axis {axis} for {nd}-D tensors"
        )));
    }
    for t in inputs {
        let ok = t.ndim() == nd
            && t
                .dims()
                .iter()
                .zip(first.dims())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(format!(
                "concat along {axis}: {:?} vs {:?}",
                t.dims(),
                first.dims()
            )));
        }
    }
    let outer: usize = first.dims()[..axis].iter().product();
    let inner: usize = first.dims()[axis + 1..].iter().product();
    let total_axis: usize = inputs.iter().map(|t| t.dims()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for t in inputs {
            let chunk = t.dims()[axis] * inner;
            data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut dims = first.dims().to_vec();
    dims[axis] = total_axis;
    Ok(Tensor::from_parts(dims, data))
}

fn split_along(grad: &Tensor, inputs: &[&Tensor], axis: usize) -> Vec<Tensor> {
    let outer: usize = grad.dims()[..axis].iter().product();
    let inner: usize = grad.dims()[axis + 1..].iter().product();
    let total = grad.dims()[axis] * inner;
    let mut offset = 0;
    let mut pieces = Vec::with_capacity(inputs.len());
    for t in inputs {
        let chunk = t.dims()[axis] * inner;
        let mut data = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            let start = o * total + offset;
            data.extend_from_slice(&grad.data()[start..start + chunk]);
        }
        pieces.push(Tensor::from_parts(t.dims().to_vec(), data));
        offset += chunk;
    }
    pieces
}

fn sum_last_axis(x: &Tensor) -> Result<Tensor> {
    if x.ndim() == 0 {
        return Err(Error::shape("sum_last_axis on a scalar"));
    }
    let n = last_dim(x);
    let dims = x.dims()[..x.ndim() - 1].to_vec();
    let rows: usize = dims.iter().product();
    let data = if n == 0 {
        vec![0.0; rows]
    } else {
        x.data().chunks(n).map(|r| r.iter().sum()).collect()
    };
    Ok(Tensor::from_parts(dims, data))
}

fn logsumexp_rows(x: &Tensor) -> Result<Tensor> {
    expect_ndim(x, 2, "logsumexp")?;
    let cols = x.dims()[1];
    if cols == 0 {
        return Err(Error::shape("logsumexp over zero columns"));
    }
    let data = x
        .data()
        .chunks(cols)
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        })
        .collect();
    Ok(Tensor::from_parts(vec![x.dims()[0]], data))
}

fn pick_columns(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    expect_ndim(x, 2, "pick_columns")?;
    let (rows, cols) = (x.dims()[0], x.dims()[1]);
    if idx.len() != rows {
        return Err(Error::shape(format!(
            "pick_columns: {} indices for {rows} rows",
            idx.len()
        )));
    }
    let mut data = Vec::with_capacity(rows);
    for (r, &c) in idx.iter().enumerate() {
        if c >= cols {
            return Err(Error::shape(format!("column {c} out of range ({cols})")));
        }
        data.push(x.data()[r * cols + c]);
    }
    Ok(Tensor::from_parts(vec![rows], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]).unwrap();
        let y = forward_op(&Op::Relu, &[&x]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_matmul() {
        let x = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap();
        let y = forward_op(&Op::MatMul, &[&Tensor::eye(3), &x]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn identity_kernel_conv() {
        let x = Tensor::new(vec![1, 1, 3, 5], (0..15).map(|v| v as f64).collect()).unwrap();
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let b = Tensor::zeros(&[1]);
        let y = forward_op(&Op::Conv2d { stride: 1, pad: 0 }, &[&x, &w, &b]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_extents_follow_formula() {
        for h in 1..9 {
            for k in 1..4 {
                for s in 1..4 {
                    for p in 0..3 {
                        let x = Tensor::ones(&[1, 2, h, h + 1]);
                        let w = Tensor::ones(&[3, 2, k, k]);
                        let b = Tensor::zeros(&[3]);
                        let r = forward_op(&Op::Conv2d { stride: s, pad: p }, &[&x, &w, &b]);
                        if h + 2 * p < k {
                            assert!(r.is_err());
                            continue;
                        }
                        let y = r.unwrap();
                        assert_eq!(y.dims()[2], (h + 2 * p - k) / s + 1);
                        assert_eq!(y.dims()[3], (h + 1 + 2 * p - k) / s + 1);
                    }
                }
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_dims() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2])).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let mut x = Tensor::zeros(&[2]);
        x.data_mut()[1] = f64::INFINITY;
        assert!(matches!(
            forward_op(&Op::Relu, &[&x]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn train_batchnorm_standardizes_channels() {
        let x = Tensor::new(
            vec![4, 2, 2, 2],
            (0..32).map(|v| ((v * 37) % 11) as f64 * 0.7 - 1.0).collect(),
        )
        .unwrap();
        let y = forward_op(
            &Op::BatchNorm {
                mode: BnMode::Train,
                eps: BN_EPS,
            },
            &[&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2])],
        )
        .unwrap();
        let (mean, var) = channel_stats(&y);
        for c in 0..2 {
            assert!(mean[c].abs() < 1e-5);
            assert!((var[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn l2_normalize_rows_are_unit() {
        let x = Tensor::from_rows(&[vec![3.0, 4.0], vec![-1e-3, 2e-3]]).unwrap();
        let y = l2_normalize(&x, L2_EPS).unwrap();
        for r in 0..2 {
            let n: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let z = l2_normalize(&Tensor::zeros(&[1, 3]), L2_EPS).unwrap();
        assert_eq!(z.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let parts = split_along(&c, &[&a, &b], 1);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn logsumexp_is_shift_stable() {
        let x = Tensor::from_rows(&[vec![1000.0, 1000.0]]).unwrap();
        let y = logsumexp_rows(&x).unwrap();
        assert!((y.data()[0] - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
