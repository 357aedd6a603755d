//! Forward and backward kernels for the primitive catalog.
//!
//! Every kernel is a pure function of its inputs and attributes; the graph in
//! [`super::graph`] records calls and replays the backward kernels in reverse.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Inputs: `x [B, Cin, L]`, `w [Cout, Cin, k]`, optional `bias [Cout]`.
    Conv1d {
        stride: usize,
        padding: usize,
    },
    /// Training inputs: `x, gamma, beta`; eval inputs add `running_mean, running_var`.
    BatchNorm1d {
        eps: f64,
    },
    Relu,
    MaxPool1d {
        kernel: usize,
        stride: usize,
    },
    AdaptiveAvgPool1d {
        output: usize,
    },
    Dropout {
        rate: f64,
        seed: u64,
    },
    /// Inputs: `x [B, in]`, `w [out, in]`, optional `bias [out]`.
    Linear,
    /// Over the last dim.
    Softmax,
    Log,
    Add,
    Mul,
    Scale(f64),
    MatMul,
    Sum,
    Mean,
    Reshape(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Conv1d { .. } => "conv1d",
            Primitive::BatchNorm1d { .. } => "batch_norm1d",
            Primitive::Relu => "relu",
            Primitive::MaxPool1d { .. } => "max_pool1d",
            Primitive::AdaptiveAvgPool1d { .. } => "adaptive_avg_pool1d",
            Primitive::Dropout { .. } => "dropout",
            Primitive::Linear => "linear",
            Primitive::Softmax => "softmax",
            Primitive::Log => "log",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::MatMul => "matmul",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Reshape(_) => "reshape",
        }
    }
}

/// Output length of a sliding window of size `kernel` over `len` (+ padding).
pub fn window_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Window `[start, end)` of output position `i` in adaptive average pooling.
pub fn adaptive_window(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

/// State kept from the forward call for the backward kernel.
#[derive(Clone, Debug, Default)]
pub enum Saved<T> {
    #[default]
    Nothing,
    Columns(Vec<T>),
    Norm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_mean: Vec<T>,
        batch_var_unbiased: Vec<T>,
    },
    Indices(Vec<usize>),
    Mask(Vec<T>),
}

fn expect_rank<T: Scalar>(p: &'static str, t: &Tensor<T>, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            p,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn expect_arity(p: &Primitive, inputs: usize, allowed: &[usize]) -> Result<()> {
    if !allowed.contains(&inputs) {
        return Err(Error::shape(
            p.name(),
            format!("expected {allowed:?} inputs, got {inputs}"),
        ));
    }
    Ok(())
}

fn channel_dims<T: Scalar>(p: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [b, c, l] => Ok((b, c, l)),
        [b, c] => Ok((b, c, 1)),
        _ => Err(Error::shape(
            p,
            format!("expected [B, C, L] or [B, C], got {:?}", x.shape()),
        )),
    }
}

/// Runs the forward kernel. `training` selects batch statistics and active dropout.
pub fn forward<T: Scalar>(
    kind: &Primitive,
    inputs: &[&Tensor<T>],
    training: bool,
) -> Result<(Tensor<T>, Saved<T>)> {
    let name = kind.name();
    for x in inputs {
        if !x.is_finite() {
            return Err(Error::NonFinite { primitive: name });
        }
    }
    match kind {
        Primitive::Conv1d { stride, padding } => {
            expect_arity(kind, inputs.len(), &[2, 3])?;
            conv1d_forward(inputs, *stride, *padding)
        }
        Primitive::BatchNorm1d { eps } => {
            expect_arity(kind, inputs.len(), if training { &[3] } else { &[5] })?;
            batch_norm_forward(inputs, *eps, training)
        }
        Primitive::Relu => {
            expect_arity(kind, inputs.len(), &[1])?;
            Ok((inputs[0].map(|v| v.max(T::zero())), Saved::Nothing))
        }
        Primitive::MaxPool1d { kernel, stride } => {
            expect_arity(kind, inputs.len(), &[1])?;
            max_pool_forward(inputs[0], *kernel, *stride)
        }
        Primitive::AdaptiveAvgPool1d { output } => {
            expect_arity(kind, inputs.len(), &[1])?;
            adaptive_avg_forward(inputs[0], *output)
        }
        Primitive::Dropout { rate, seed } => {
            expect_arity(kind, inputs.len(), &[1])?;
            if !(0.0..1.0).contains(rate) {
                return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
            }
            if !training || *rate == 0.0 {
                return Ok((inputs[0].clone(), Saved::Nothing));
            }
            let keep_scale = T::lit(1.0 / (1.0 - rate));
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mask: Vec<T> = (0..inputs[0].numel())
                .map(|_| {
                    if rng.random::<f64>() < *rate {
                        T::zero()
                    } else {
                        keep_scale
                    }
                })
                .collect();
            let data = inputs[0]
                .data()
                .iter()
                .zip(&mask)
                .map(|(&x, &m)| x * m)
                .collect();
            Ok((Tensor::new(inputs[0].shape(), data)?, Saved::Mask(mask)))
        }
        Primitive::Linear => {
            expect_arity(kind, inputs.len(), &[2, 3])?;
            linear_forward(inputs)
        }
        Primitive::Softmax => {
            expect_arity(kind, inputs.len(), &[1])?;
            Ok((softmax_last(inputs[0]), Saved::Nothing))
        }
        Primitive::Log => {
            expect_arity(kind, inputs.len(), &[1])?;
            if inputs[0].data().iter().any(|&v| v <= T::zero()) {
                return Err(Error::NonFinite { primitive: name });
            }
            Ok((inputs[0].map(|v| v.ln()), Saved::Nothing))
        }
        Primitive::Add | Primitive::Mul => {
            expect_arity(kind, inputs.len(), &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    name,
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| {
                    if *kind == Primitive::Add {
                        x + y
                    } else {
                        x * y
                    }
                })
                .collect();
            Ok((Tensor::new(a.shape(), data)?, Saved::Nothing))
        }
        Primitive::Scale(f) => {
            expect_arity(kind, inputs.len(), &[1])?;
            let f = T::lit(*f);
            Ok((inputs[0].map(|v| v * f), Saved::Nothing))
        }
        Primitive::MatMul => {
            expect_arity(kind, inputs.len(), &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            expect_rank(name, a, 2)?;
            expect_rank(name, b, 2)?;
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            if k != k2 {
                return Err(Error::shape(
                    name,
                    format!("inner dims {:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let mut c = vec![T::zero(); m * n];
            gemm(
                m,
                k,
                n,
                T::one(),
                a.data(),
                false,
                b.data(),
                false,
                T::zero(),
                &mut c,
            );
            Ok((Tensor::new(&[m, n], c)?, Saved::Nothing))
        }
        Primitive::Sum => {
            expect_arity(kind, inputs.len(), &[1])?;
            Ok((Tensor::scalar(inputs[0].sum()), Saved::Nothing))
        }
        Primitive::Mean => {
            expect_arity(kind, inputs.len(), &[1])?;
            let n = T::lit(inputs[0].numel() as f64);
            Ok((Tensor::scalar(inputs[0].sum() / n), Saved::Nothing))
        }
        Primitive::Reshape(shape) => {
            expect_arity(kind, inputs.len(), &[1])?;
            Ok((inputs[0].clone().reshape(shape)?, Saved::Nothing))
        }
    }
}

/// Runs the backward kernel, returning one gradient per input (`None` where
/// `needs[i]` is false or the input is not differentiable).
pub fn backward<T: Scalar>(
    kind: &Primitive,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    saved: &Saved<T>,
    grad: &Tensor<T>,
    needs: &[bool],
    training: bool,
) -> Vec<Option<Tensor<T>>> {
    let mut out: Vec<Option<Tensor<T>>> = vec![None; inputs.len()];
    match kind {
        Primitive::Conv1d { stride, padding } => {
            return conv1d_backward(inputs, saved, grad, needs, *stride, *padding);
        }
        Primitive::BatchNorm1d { .. } => {
            return batch_norm_backward(inputs, saved, grad, needs, training);
        }
        Primitive::Relu => {
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                .collect();
            out[0] = Some(Tensor::new(x.shape(), data).expect("shape"));
        }
        Primitive::MaxPool1d { .. } => {
            let Saved::Indices(idx) = saved else {
                unreachable!("max_pool saves indices")
            };
            let mut dx = vec![T::zero(); inputs[0].numel()];
            for (&i, &g) in idx.iter().zip(grad.data()) {
                dx[i] += g;
            }
            out[0] = Some(Tensor::new(inputs[0].shape(), dx).expect("shape"));
        }
        Primitive::AdaptiveAvgPool1d { output: p } => {
            let (b, c, l) = channel_dims("adaptive_avg_pool1d", inputs[0]).expect("checked");
            let mut dx = vec![T::zero(); inputs[0].numel()];
            for row in 0..b * c {
                for i in 0..*p {
                    let (s, e) = adaptive_window(i, l, *p);
                    let g = grad.data()[row * p + i] / T::lit((e - s) as f64);
                    for v in &mut dx[row * l + s..row * l + e] {
                        *v += g;
                    }
                }
            }
            out[0] = Some(Tensor::new(inputs[0].shape(), dx).expect("shape"));
        }
        Primitive::Dropout { .. } => {
            out[0] = Some(match saved {
                Saved::Mask(mask) => {
                    let data = grad.data().iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    Tensor::new(grad.shape(), data).expect("shape")
                }
                _ => grad.clone(),
            });
        }
        Primitive::Linear => return linear_backward(inputs, grad, needs),
        Primitive::Softmax => {
            let k = *output.shape().last().expect("rank >= 1");
            let mut dx = vec![T::zero(); output.numel()];
            for ((y, g), d) in output
                .data()
                .chunks(k)
                .zip(grad.data().chunks(k))
                .zip(dx.chunks_mut(k))
            {
                let dot: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                for j in 0..k {
                    d[j] = y[j] * (g[j] - dot);
                }
            }
            out[0] = Some(Tensor::new(output.shape(), dx).expect("shape"));
        }
        Primitive::Log => {
            let x = inputs[0];
            let data = x
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&v, &g)| g / v)
                .collect();
            out[0] = Some(Tensor::new(x.shape(), data).expect("shape"));
        }
        Primitive::Add => {
            out[0] = Some(grad.clone());
            out[1] = Some(grad.clone());
        }
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = b
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&y, &g)| y * g)
                .collect();
            let db = a
                .data()
                .iter()
                .zip(grad.data())
                .map(|(&x, &g)| x * g)
                .collect();
            out[0] = Some(Tensor::new(a.shape(), da).expect("shape"));
            out[1] = Some(Tensor::new(b.shape(), db).expect("shape"));
        }
        Primitive::Scale(f) => {
            let f = T::lit(*f);
            out[0] = Some(grad.map(|g| g * f));
        }
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if needs[0] {
                let mut da = vec![T::zero(); m * k];
                gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    grad.data(),
                    false,
                    b.data(),
                    true,
                    T::zero(),
                    &mut da,
                );
                out[0] = Some(Tensor::new(a.shape(), da).expect("shape"));
            }
            if needs[1] {
                let mut db = vec![T::zero(); k * n];
                gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    a.data(),
                    true,
                    grad.data(),
                    false,
                    T::zero(),
                    &mut db,
                );
                out[1] = Some(Tensor::new(b.shape(), db).expect("shape"));
            }
        }
        Primitive::Sum => {
            out[0] = Some(Tensor::full(inputs[0].shape(), grad.item()));
        }
        Primitive::Mean => {
            let n = T::lit(inputs[0].numel() as f64);
            out[0] = Some(Tensor::full(inputs[0].shape(), grad.item() / n));
        }
        Primitive::Reshape(_) => {
            out[0] = Some(grad.clone().reshape(inputs[0].shape()).expect("shape"));
        }
    }
    for (o, &n) in out.iter_mut().zip(needs) {
        if !n {
            *o = None;
        }
    }
    out
}

pub(crate) fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let k = *x.shape().last().unwrap_or(&1);
    let mut y = x.data().to_vec();
    for row in y.chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(x.shape(), y).expect("same shape")
}

fn conv1d_forward<T: Scalar>(
    inputs: &[&Tensor<T>],
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Saved<T>)> {
    let (x, w) = (inputs[0], inputs[1]);
    expect_rank("conv1d", x, 3)?;
    expect_rank("conv1d", w, 3)?;
    let (b, cin, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if cin != wcin {
        return Err(Error::shape(
            "conv1d",
            format!("input channels {cin} vs weight {:?}", w.shape()),
        ));
    }
    if let Some(bias) = inputs.get(2) {
        if bias.shape() != [cout] {
            return Err(Error::shape(
                "conv1d",
                format!("bias {:?} vs {cout} filters", bias.shape()),
            ));
        }
    }
    let lout = window_out_len(l, k, stride, padding).ok_or_else(|| {
        Error::shape(
            "conv1d",
            format!("length {l} (pad {padding}) shorter than kernel {k} or zero stride"),
        )
    })?;
    let cols = im2col(x.data(), b, cin, l, k, stride, padding, lout);
    let ncol = b * lout;
    let mut mat = vec![T::zero(); cout * ncol];
    gemm(
        cout,
        cin * k,
        ncol,
        T::one(),
        w.data(),
        false,
        &cols,
        false,
        T::zero(),
        &mut mat,
    );
    let mut y = vec![T::zero(); b * cout * lout];
    for co in 0..cout {
        let bias = inputs.get(2).map_or(T::zero(), |t| t.data()[co]);
        for bi in 0..b {
            let src = &mat[co * ncol + bi * lout..co * ncol + (bi + 1) * lout];
            let dst = &mut y[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    Ok((Tensor::new(&[b, cout, lout], y)?, Saved::Columns(cols)))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    b: usize,
    cin: usize,
    l: usize,
    k: usize,
    stride: usize,
    padding: usize,
    lout: usize,
) -> Vec<T> {
    let ncol = b * lout;
    let mut cols = vec![T::zero(); cin * k * ncol];
    for ci in 0..cin {
        for kk in 0..k {
            let row = &mut cols[(ci * k + kk) * ncol..(ci * k + kk + 1) * ncol];
            for bi in 0..b {
                let xs = &x[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                for t in 0..lout {
                    let pos = (t * stride + kk) as isize - padding as isize;
                    if pos >= 0 && (pos as usize) < l {
                        row[bi * lout + t] = xs[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

fn conv1d_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    saved: &Saved<T>,
    grad: &Tensor<T>,
    needs: &[bool],
    stride: usize,
    padding: usize,
) -> Vec<Option<Tensor<T>>> {
    let Saved::Columns(cols) = saved else {
        unreachable!("conv1d saves columns")
    };
    let (x, w) = (inputs[0], inputs[1]);
    let (b, cin, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let lout = grad.shape()[2];
    let ncol = b * lout;
    // [B, Cout, Lout] -> [Cout, B * Lout]
    let mut gmat = vec![T::zero(); cout * ncol];
    for bi in 0..b {
        for co in 0..cout {
            let src = &grad.data()[(bi * cout + co) * lout..(bi * cout + co + 1) * lout];
            gmat[co * ncol + bi * lout..co * ncol + (bi + 1) * lout].copy_from_slice(src);
        }
    }
    let mut out = vec![None; inputs.len()];
    if needs[1] {
        let mut dw = vec![T::zero(); cout * cin * k];
        gemm(
            cout,
            ncol,
            cin * k,
            T::one(),
            &gmat,
            false,
            cols,
            true,
            T::zero(),
            &mut dw,
        );
        out[1] = Some(Tensor::new(w.shape(), dw).expect("shape"));
    }
    if inputs.len() > 2 && needs[2] {
        let db = (0..cout)
            .map(|co| gmat[co * ncol..(co + 1) * ncol].iter().copied().sum())
            .collect();
        out[2] = Some(Tensor::new(&[cout], db).expect("shape"));
    }
    if needs[0] {
        let mut dcols = vec![T::zero(); cin * k * ncol];
        gemm(
            cin * k,
            cout,
            ncol,
            T::one(),
            w.data(),
            true,
            &gmat,
            false,
            T::zero(),
            &mut dcols,
        );
        let mut dx = vec![T::zero(); x.numel()];
        for ci in 0..cin {
            for kk in 0..k {
                let row = &dcols[(ci * k + kk) * ncol..(ci * k + kk + 1) * ncol];
                for bi in 0..b {
                    let xs = &mut dx[(bi * cin + ci) * l..(bi * cin + ci + 1) * l];
                    for t in 0..lout {
                        let pos = (t * stride + kk) as isize - padding as isize;
                        if pos >= 0 && (pos as usize) < l {
                            xs[pos as usize] += row[bi * lout + t];
                        }
                    }
                }
            }
        }
        out[0] = Some(Tensor::new(x.shape(), dx).expect("shape"));
    }
    out
}

fn batch_norm_forward<T: Scalar>(
    inputs: &[&Tensor<T>],
    eps: f64,
    training: bool,
) -> Result<(Tensor<T>, Saved<T>)> {
    let x = inputs[0];
    let (b, c, l) = channel_dims("batch_norm1d", x)?;
    for (i, t) in inputs.iter().enumerate().skip(1) {
        if t.shape() != [c] {
            return Err(Error::shape(
                "batch_norm1d",
                format!("parameter {i} has shape {:?}, expected [{c}]", t.shape()),
            ));
        }
    }
    let n = b * l;
    let (gamma, beta) = (inputs[1].data(), inputs[2].data());
    let eps = T::lit(eps);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut unbiased = vec![T::zero(); c];
    if training {
        if n < 2 {
            return Err(Error::shape(
                "batch_norm1d",
                format!(
                    "training needs more than one value per channel, got {:?}",
                    x.shape()
                ),
            ));
        }
        let nf = T::lit(n as f64);
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                s += x.data()[(bi * c + ch) * l..(bi * c + ch + 1) * l]
                    .iter()
                    .copied()
                    .sum();
            }
            let m = s / nf;
            let mut ss = T::zero();
            for bi in 0..b {
                for &v in &x.data()[(bi * c + ch) * l..(bi * c + ch + 1) * l] {
                    ss += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = ss / nf;
            unbiased[ch] = ss / T::lit((n - 1) as f64);
        }
    } else {
        mean.copy_from_slice(inputs[3].data());
        var.copy_from_slice(inputs[4].data());
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut y = vec![T::zero(); x.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * l;
            for j in off..off + l {
                xhat[j] = (x.data()[j] - mean[ch]) * inv_std[ch];
                y[j] = gamma[ch] * xhat[j] + beta[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        Saved::Norm {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var_unbiased: unbiased,
        },
    ))
}

fn batch_norm_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    saved: &Saved<T>,
    grad: &Tensor<T>,
    needs: &[bool],
    training: bool,
) -> Vec<Option<Tensor<T>>> {
    let Saved::Norm { xhat, inv_std, .. } = saved else {
        unreachable!("batch_norm saves normalized input")
    };
    let x = inputs[0];
    let (b, c, l) = channel_dims("batch_norm1d", x).expect("checked");
    let gamma = inputs[1].data();
    let dy = grad.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * l;
            for j in off..off + l {
                dgamma[ch] += dy[j] * xhat[j];
                dbeta[ch] += dy[j];
            }
        }
    }
    let mut out = vec![None; inputs.len()];
    if needs[0] {
        let mut dx = vec![T::zero(); x.numel()];
        let nf = T::lit((b * l) as f64);
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * l;
                let scale = gamma[ch] * inv_std[ch];
                for j in off..off + l {
                    dx[j] = if training {
                        scale / nf * (nf * dy[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                    } else {
                        scale * dy[j]
                    };
                }
            }
        }
        out[0] = Some(Tensor::new(x.shape(), dx).expect("shape"));
    }
    if needs[1] {
        out[1] = Some(Tensor::new(&[c], dgamma).expect("shape"));
    }
    if needs[2] {
        out[2] = Some(Tensor::new(&[c], dbeta).expect("shape"));
    }
    out
}

fn max_pool_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, Saved<T>)> {
    expect_rank("max_pool1d", x, 3)?;
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let lout = window_out_len(l, kernel, stride, 0).ok_or_else(|| {
        Error::shape(
            "max_pool1d",
            format!("length {l} shorter than pool kernel {kernel} or zero stride"),
        )
    })?;
    let mut y = Vec::with_capacity(b * c * lout);
    let mut idx = Vec::with_capacity(b * c * lout);
    for row in 0..b * c {
        let xs = &x.data()[row * l..(row + 1) * l];
        for t in 0..lout {
            let start = t * stride;
            let mut best = start;
            for j in start + 1..start + kernel {
                if xs[j] > xs[best] {
                    best = j;
                }
            }
            y.push(xs[best]);
            idx.push(row * l + best);
        }
    }
    Ok((Tensor::new(&[b, c, lout], y)?, Saved::Indices(idx)))
}

fn adaptive_avg_forward<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<(Tensor<T>, Saved<T>)> {
    expect_rank("adaptive_avg_pool1d", x, 3)?;
    if p == 0 {
        return Err(Error::shape("adaptive_avg_pool1d", "output length 0"));
    }
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut y = Vec::with_capacity(b * c * p);
    for row in 0..b * c {
        let xs = &x.data()[row * l..(row + 1) * l];
        for i in 0..p {
            let (s, e) = adaptive_window(i, l, p);
            let total: T = xs[s..e].iter().copied().sum();
            y.push(total / T::lit((e - s) as f64));
        }
    }
    Ok((Tensor::new(&[b, c, p], y)?, Saved::Nothing))
}

fn linear_forward<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<(Tensor<T>, Saved<T>)> {
    let (x, w) = (inputs[0], inputs[1]);
    expect_rank("linear", x, 2)?;
    expect_rank("linear", w, 2)?;
    let (b, din) = (x.shape()[0], x.shape()[1]);
    let (dout, win) = (w.shape()[0], w.shape()[1]);
    if din != win {
        return Err(Error::shape(
            "linear",
            format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
        ));
    }
    let mut y = vec![T::zero(); b * dout];
    if let Some(bias) = inputs.get(2) {
        if bias.shape() != [dout] {
            return Err(Error::shape(
                "linear",
                format!("bias {:?} vs {dout} outputs", bias.shape()),
            ));
        }
        for row in y.chunks_mut(dout) {
            row.copy_from_slice(bias.data());
        }
    }
    gemm(
        b,
        din,
        dout,
        T::one(),
        x.data(),
        false,
        w.data(),
        true,
        T::one(),
        &mut y,
    );
    Ok((Tensor::new(&[b, dout], y)?, Saved::Nothing))
}

fn linear_backward<T: Scalar>(
    inputs: &[&Tensor<T>],
    grad: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let (x, w) = (inputs[0], inputs[1]);
    let (b, din) = (x.shape()[0], x.shape()[1]);
    let dout = w.shape()[0];
    let mut out = vec![None; inputs.len()];
    if needs[0] {
        let mut dx = vec![T::zero(); b * din];
        gemm(
            b,
            dout,
            din,
            T::one(),
            grad.data(),
            false,
            w.data(),
            false,
            T::zero(),
            &mut dx,
        );
        out[0] = Some(Tensor::new(x.shape(), dx).expect("shape"));
    }
    if needs[1] {
        let mut dw = vec![T::zero(); dout * din];
        gemm(
            dout,
            b,
            din,
            T::one(),
            grad.data(),
            true,
            x.data(),
            false,
            T::zero(),
            &mut dw,
        );
        out[1] = Some(Tensor::new(w.shape(), dw).expect("shape"));
    }
    if inputs.len() > 2 && needs[2] {
        let mut db = vec![T::zero(); dout];
        for row in grad.data().chunks(dout) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        out[2] = Some(Tensor::new(&[dout], db).expect("shape"));
    }
    out
}
