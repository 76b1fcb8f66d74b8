//! Layer primitives and losses with their backward rules.
//!
//! Image tensors are NCHW, convolution kernels OIHW, dense weights `[out, in]`.

use crate::error::{Error, Result};
use crate::tape::{BackwardOp, Tape, Var};
use crate::tensor::{matmul_into, Scalar, Tensor};

/// Floor applied to `q` inside the logarithm of the KL divergence.
pub const KL_LOG_FLOOR: f64 = 1e-12;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

// ---------------------------------------------------------------------------
// Probabilities

/// A probability vector: non-negative entries summing to one within `1e-5`.
#[derive(Clone, Debug, PartialEq)]
pub struct Probabilities(Vec<f64>);

impl Probabilities {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("empty probability vector".into()));
        }
        if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Shape(format!("invalid probabilities {values:?}")));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::Shape(format!("probabilities sum to {total}")));
        }
        Ok(Probabilities(values))
    }

    /// Numerically stable softmax of a logit row.
    pub fn from_logits<T: Scalar>(logits: &[T]) -> Self {
        let mut out = vec![0.0; logits.len()];
        softmax_row(logits, &mut out);
        Probabilities(out)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// `KL(p || q) = sum p_i ln(p_i / q_i)` with `0 ln 0 = 0` and `q` floored at
/// [`KL_LOG_FLOOR`] inside the log.
pub fn kl_divergence(p: &Probabilities, q: &Probabilities) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "kl_divergence of lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.0
        .iter()
        .zip(&q.0)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - qi.max(KL_LOG_FLOOR).ln()))
        .sum())
}

/// Softmax over the last dimension of a `[rows, classes]` tensor.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cols) = as_matrix(logits.shape(), "softmax")?;
    let mut out = Vec::with_capacity(rows * cols);
    let mut buf = vec![0.0; cols];
    for r in 0..rows {
        softmax_row(&logits.data()[r * cols..(r + 1) * cols], &mut buf);
        out.extend(buf.iter().map(|&v| T::from_f64(v)));
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax_row<T: Scalar>(logits: &[T], out: &mut [f64]) {
    let max = logits
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = (l.as_f64() - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// `ln softmax` of a row, computed with the log-sum-exp shift.
fn log_softmax_row<T: Scalar>(logits: &[T], out: &mut [f64]) {
    let max = logits
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|l| (l.as_f64() - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    for (o, l) in out.iter_mut().zip(logits) {
        *o = l.as_f64() - lse;
    }
}

fn as_matrix(shape: &[usize], op: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape(format!("{op} needs a matrix, got {shape:?}"))),
    }
}

fn as_nchw(shape: &[usize], op: &str) -> Result<[usize; 4]> {
    match shape {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        _ => Err(Error::Shape(format!(
            "{op} needs an NCHW tensor, got {shape:?}"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, img: &[T], cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], img: &mut [T]) {
    let p = g.p();
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp<T> {
    geom: ConvGeometry,
    /// im2col buffers, kept only when the kernel needs a gradient.
    cols: Option<Vec<T>>,
}

impl<T: Scalar> BackwardOp<T> for Conv2dOp<T> {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn grads(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let geom = &self.geom;
        let (k, p) = (geom.k(), geom.p());
        let in_size = geom.c * geom.h * geom.w;
        let out_size = geom.o * p;
        let x = inputs[0].data();
        let w = inputs[1].data();

        let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);
        let mut dw = needs[1].then(|| vec![T::zero(); w.len()]);
        let mut dcols = vec![T::zero(); k * p];
        let mut scratch = if dw.is_some() && self.cols.is_none() {
            vec![T::zero(); k * p]
        } else {
            Vec::new()
        };
        for n in 0..geom.n {
            let gout = &g[n * out_size..(n + 1) * out_size];
            if let Some(dw) = dw.as_mut() {
                let cols: &[T] = match &self.cols {
                    Some(all) => &all[n * k * p..(n + 1) * k * p],
                    None => {
                        im2col(geom, &x[n * in_size..(n + 1) * in_size], &mut scratch);
                        &scratch
                    }
                };
                // dW[O,K] += gout[O,P] * cols^T[P,K]
                matmul_into(gout, false, cols, true, geom.o, p, k, dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                // dcols[K,P] = W^T[K,O] * gout[O,P]
                matmul_into(w, true, gout, false, k, geom.o, p, &mut dcols, false);
                col2im(geom, &dcols, &mut dx[n * in_size..(n + 1) * in_size]);
            }
        }
        vec![dx, dw]
    }
}

/// Cross-correlation of an NCHW input with an OIHW kernel, no bias.
pub fn conv2d<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    kernel: Var,
    stride: usize,
    padding: usize,
) -> Result<Var> {
    let [n, c, h, w] = as_nchw(tape.shape(input), "conv2d")?;
    let [o, ci, kh, kw] = as_nchw(tape.shape(kernel), "conv2d kernel")?;
    if ci != c {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input has {c}, kernel expects {ci}"
        )));
    }
    if stride == 0 {
        return Err(Error::Shape("conv2d stride must be positive".into()));
    }
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    if hp < kh || wp < kw {
        return Err(Error::Shape(format!(
            "conv2d output extent is not positive for {h}x{w} input, {kh}x{kw} kernel, padding {padding}"
        )));
    }
    let geom = ConvGeometry {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        stride,
        pad: padding,
        oh: (hp - kh) / stride + 1,
        ow: (wp - kw) / stride + 1,
    };
    let (k, p) = (geom.k(), geom.p());
    let keep_cols = tape.requires_grad(kernel);
    let x = tape.value(input).data();
    let wt = tape.value(kernel).data();
    let mut out = vec![T::zero(); n * o * p];
    let mut cols_all = if keep_cols {
        vec![T::zero(); n * k * p]
    } else {
        Vec::new()
    };
    let mut cols = if keep_cols {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for s in 0..n {
        let img = &x[s * c * h * w..(s + 1) * c * h * w];
        let buf: &mut [T] = if keep_cols {
            &mut cols_all[s * k * p..(s + 1) * k * p]
        } else {
            &mut cols
        };
        im2col(&geom, img, buf);
        matmul_into(
            wt,
            false,
            buf,
            false,
            o,
            k,
            p,
            &mut out[s * o * p..(s + 1) * o * p],
            false,
        );
    }
    let out = Tensor::from_parts(vec![n, o, geom.oh, geom.ow], out);
    let op = Conv2dOp {
        geom,
        cols: keep_cols.then_some(cols_all),
    };
    Ok(tape.record(out, &[input, kernel], op))
}

// ---------------------------------------------------------------------------
// Batch normalization

/// Per-channel batch statistics (biased variance).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (momentum * *r as f64 + (1.0 - momentum) * b) as f32;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (momentum * *r as f64 + (1.0 - momentum) * b) as f32;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Channel layout of a tensor normalized per channel: `[N, C, *spatial]`.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c, 1)),
        [n, c, rest @ ..] if !rest.is_empty() => Ok((*n, *c, rest.iter().product())),
        _ => Err(Error::Shape(format!(
            "per-channel op needs [N, C, ...], got {shape:?}"
        ))),
    }
}

fn check_channel_param<T: Scalar>(t: &Tensor<T>, channels: usize, what: &str) -> Result<()> {
    if t.len() != channels {
        return Err(Error::Shape(format!(
            "{what} has {} entries for {channels} channels",
            t.len()
        )));
    }
    Ok(())
}

struct BatchNormTrainOp<T> {
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    layout: (usize, usize, usize),
}

impl<T: Scalar> BackwardOp<T> for BatchNormTrainOp<T> {
    fn kind(&self) -> &'static str {
        "batch_norm_train"
    }

    fn grads(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (n, c, s) = self.layout;
        let gamma = inputs[1].data();
        let m = (n * s) as f64;
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    let gv = g[i].as_f64();
                    dbeta[ch] += gv;
                    dgamma[ch] += gv * self.xhat[i].as_f64();
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); g.len()];
            for b in 0..n {
                for ch in 0..c {
                    let scale = gamma[ch].as_f64() * self.inv_std[ch] / m;
                    let base = (b * c + ch) * s;
                    for i in base..base + s {
                        let v = m * g[i].as_f64() - dbeta[ch] - self.xhat[i].as_f64() * dgamma[ch];
                        dx[i] = T::from_f64(scale * v);
                    }
                }
            }
            dx
        });
        let to_t = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
        vec![
            dx,
            needs[1].then(|| to_t(dgamma)),
            needs[2].then(|| to_t(dbeta)),
        ]
    }
}

/// Batch normalization with batch statistics. Returns the statistics so the
/// caller can fold them into running estimates.
pub fn batch_norm_train<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> Result<(Var, BatchStats)> {
    let layout @ (n, c, s) = channel_layout(tape.shape(input))?;
    check_channel_param(tape.value(gamma), c, "batch_norm gamma")?;
    check_channel_param(tape.value(beta), c, "batch_norm beta")?;
    let x = tape.value(input).data();
    let m = (n * s) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            mean[ch] += x[base..base + s].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            var[ch] += x[base..base + s]
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean[ch];
                    d * d
                })
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let gm = tape.value(gamma).data();
    let bt = tape.value(beta).data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let (gc, bc) = (gm[ch].as_f64(), bt[ch].as_f64());
            for i in base..base + s {
                let xh = (x[i].as_f64() - mean[ch]) * inv_std[ch];
                xhat[i] = T::from_f64(xh);
                out[i] = T::from_f64(gc * xh + bc);
            }
        }
    }
    let out = Tensor::from_parts(tape.shape(input).to_vec(), out);
    let needs_grad = tape.any_requires_grad(&[input, gamma, beta]);
    let op = BatchNormTrainOp {
        xhat: if needs_grad { xhat } else { Vec::new() },
        inv_std,
        layout,
    };
    let v = tape.record(out, &[input, gamma, beta], op);
    Ok((v, BatchStats { mean, var }))
}

struct ChannelAffineParamsOp {
    layout: (usize, usize, usize),
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl<T: Scalar> BackwardOp<T> for ChannelAffineParamsOp {
    fn kind(&self) -> &'static str {
        "batch_norm_eval"
    }

    fn grads(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (n, c, s) = self.layout;
        let x = inputs[0].data();
        let gamma = inputs[1].data();
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        let mut dx = needs[0].then(|| vec![T::zero(); g.len()]);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                let scale = gamma[ch].as_f64() * self.inv_std[ch];
                for i in base..base + s {
                    let gv = g[i].as_f64();
                    dbeta[ch] += gv;
                    dgamma[ch] += gv * (x[i].as_f64() - self.mean[ch]) * self.inv_std[ch];
                    if let Some(dx) = dx.as_mut() {
                        dx[i] = T::from_f64(gv * scale);
                    }
                }
            }
        }
        let to_t = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
        vec![
            dx,
            needs[1].then(|| to_t(dgamma)),
            needs[2].then(|| to_t(dbeta)),
        ]
    }
}

/// Batch normalization with fixed (running) statistics.
pub fn batch_norm_eval<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    stats: &RunningStats,
    eps: f64,
) -> Result<Var> {
    let layout @ (n, c, s) = channel_layout(tape.shape(input))?;
    check_channel_param(tape.value(gamma), c, "batch_norm gamma")?;
    check_channel_param(tape.value(beta), c, "batch_norm beta")?;
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::Shape(format!(
            "running statistics cover {} channels, input has {c}",
            stats.mean.len()
        )));
    }
    let mean: Vec<f64> = stats.mean.iter().map(|&v| v as f64).collect();
    let inv_std: Vec<f64> = stats
        .var
        .iter()
        .map(|&v| 1.0 / (v as f64 + eps).sqrt())
        .collect();
    let x = tape.value(input).data();
    let gm = tape.value(gamma).data();
    let bt = tape.value(beta).data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let scale = gm[ch].as_f64() * inv_std[ch];
            let shift = bt[ch].as_f64() - mean[ch] * scale;
            for i in base..base + s {
                out[i] = T::from_f64(x[i].as_f64() * scale + shift);
            }
        }
    }
    let out = Tensor::from_parts(tape.shape(input).to_vec(), out);
    let op = ChannelAffineParamsOp {
        layout,
        mean,
        inv_std,
    };
    Ok(tape.record(out, &[input, gamma, beta], op))
}

/// Batch normalization in either mode. In train mode the running statistics
/// are updated with `momentum`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    gamma: Var,
    beta: Var,
    running: &mut RunningStats,
    mode: Mode,
    eps: f64,
    momentum: f64,
) -> Result<Var> {
    match mode {
        Mode::Train => {
            let (out, stats) = batch_norm_train(tape, input, gamma, beta, eps)?;
            running.update(&stats, momentum);
            Ok(out)
        }
        Mode::Eval => batch_norm_eval(tape, input, gamma, beta, running, eps),
    }
}

struct ChannelAffineOp {
    layout: (usize, usize, usize),
    scale: Vec<f64>,
}

impl<T: Scalar> BackwardOp<T> for ChannelAffineOp {
    fn kind(&self) -> &'static str {
        "channel_affine"
    }

    fn grads(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let (n, c, s) = self.layout;
        let mut dx = vec![T::zero(); g.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                let sc = T::from_f64(self.scale[ch]);
                for i in base..base + s {
                    dx[i] = g[i] * sc;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// `y = x * scale[c] + shift[c]` with constant per-channel coefficients.
pub fn channel_affine<T: Scalar>(
    tape: &mut Tape<T>,
    input: Var,
    scale: &[f64],
    shift: &[f64],
) -> Result<Var> {
    let layout @ (n, c, s) = channel_layout(tape.shape(input))?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::Shape(format!(
            "channel_affine coefficients for {} channels, input has {c}",
            scale.len()
        )));
    }
    let x = tape.value(input).data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let (sc, sh) = (T::from_f64(scale[ch]), T::from_f64(shift[ch]));
            for i in base..base + s {
                out[i] = x[i] * sc + sh;
            }
        }
    }
    let out = Tensor::from_parts(tape.shape(input).to_vec(), out);
    let op = ChannelAffineOp {
        layout,
        scale: scale.to_vec(),
    };
    Ok(tape.record(out, &[input], op))
}

// ---------------------------------------------------------------------------
// Activations, pooling, dense

struct ReluOp;

impl<T: Scalar> BackwardOp<T> for ReluOp {
    fn kind(&self) -> &'static str {
        "relu"
    }
    fn grads(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let dx = g
            .iter()
            .zip(out.data())
            .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
            .collect();
        vec![Some(dx)]
    }
}

pub fn relu<T: Scalar>(tape: &mut Tape<T>, input: Var) -> Var {
    let out = tape
        .value(input)
        .map(|v| if v > T::zero() { v } else { T::zero() });
    tape.record(out, &[input], ReluOp)
}

struct MaxPoolOp {
    argmax: Vec<u32>,
}

impl<T: Scalar> BackwardOp<T> for MaxPoolOp {
    fn kind(&self) -> &'static str {
        "max_pool2d"
    }
    fn grads(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        _: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let mut dx = vec![T::zero(); inputs[0].len()];
        for (&src, &gv) in self.argmax.iter().zip(g) {
            dx[src as usize] += gv;
        }
        vec![Some(dx)]
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
/// Ties resolve to the first maximum in row-major window order.
pub fn max_pool2d<T: Scalar>(tape: &mut Tape<T>, input: Var) -> Result<Var> {
    let [n, c, h, w] = as_nchw(tape.shape(input), "max_pool2d")?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("max_pool2d on {h}x{w} input")));
    }
    let x = tape.value(input).data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    let out = Tensor::from_parts(vec![n, c, oh, ow], out);
    Ok(tape.record(out, &[input], MaxPoolOp { argmax }))
}

struct GlobalAvgPoolOp {
    spatial: usize,
}

impl<T: Scalar> BackwardOp<T> for GlobalAvgPoolOp {
    fn kind(&self) -> &'static str {
        "global_avg_pool"
    }
    fn grads(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let inv = T::from_f64(1.0 / self.spatial as f64);
        let mut dx = Vec::with_capacity(g.len() * self.spatial);
        for &gv in g {
            dx.extend(std::iter::repeat_n(gv * inv, self.spatial));
        }
        vec![Some(dx)]
    }
}

/// Mean over the spatial extent: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, input: Var) -> Result<Var> {
    let [n, c, h, w] = as_nchw(tape.shape(input), "global_avg_pool")?;
    let s = h * w;
    let x = tape.value(input).data();
    let out = (0..n * c)
        .map(|i| {
            T::from_f64(
                x[i * s..(i + 1) * s]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>()
                    / s as f64,
            )
        })
        .collect();
    let out = Tensor::from_parts(vec![n, c], out);
    Ok(tape.record(out, &[input], GlobalAvgPoolOp { spatial: s }))
}

struct LinearOp {
    batch: usize,
    inputs: usize,
    outputs: usize,
}

impl<T: Scalar> BackwardOp<T> for LinearOp {
    fn kind(&self) -> &'static str {
        "dense"
    }
    fn grads(
        &self,
        inputs: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let (b, i, o) = (self.batch, self.inputs, self.outputs);
        let x = inputs[0].data();
        let w = inputs[1].data();
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); b * i];
            matmul_into(g, false, w, false, b, o, i, &mut dx, false);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); o * i];
            matmul_into(g, true, x, false, o, b, i, &mut dw, false);
            dw
        });
        let db = needs[2].then(|| {
            (0..o)
                .map(|j| T::from_f64((0..b).map(|r| g[r * o + j].as_f64()).sum()))
                .collect()
        });
        vec![dx, dw, db]
    }
}

/// `y = x W^T + b` for `x: [B, I]`, `W: [O, I]`, `b: [O]`.
pub fn dense<T: Scalar>(tape: &mut Tape<T>, input: Var, weight: Var, bias: Var) -> Result<Var> {
    let (b, i) = as_matrix(tape.shape(input), "dense input")?;
    let (o, wi) = as_matrix(tape.shape(weight), "dense weight")?;
    if wi != i {
        return Err(Error::Shape(format!(
            "dense weight expects {wi} inputs, got {i}"
        )));
    }
    if tape.value(bias).len() != o {
        return Err(Error::Shape(format!(
            "dense bias has {} entries for {o} outputs",
            tape.value(bias).len()
        )));
    }
    let mut out = vec![T::zero(); b * o];
    for r in 0..b {
        out[r * o..(r + 1) * o].copy_from_slice(tape.value(bias).data());
    }
    matmul_into(
        tape.value(input).data(),
        false,
        tape.value(weight).data(),
        true,
        b,
        i,
        o,
        &mut out,
        true,
    );
    let out = Tensor::from_parts(vec![b, o], out);
    Ok(tape.record(
        out,
        &[input, weight, bias],
        LinearOp {
            batch: b,
            inputs: i,
            outputs: o,
        },
    ))
}

struct SoftmaxOp {
    cols: usize,
}

impl<T: Scalar> BackwardOp<T> for SoftmaxOp {
    fn kind(&self) -> &'static str {
        "softmax"
    }
    fn grads(&self, _: &[&Tensor<T>], out: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let y = out.data();
        let c = self.cols;
        let mut dx = vec![T::zero(); g.len()];
        for r in 0..g.len() / c {
            let row = r * c..(r + 1) * c;
            let dotp: f64 = g[row.clone()]
                .iter()
                .zip(&y[row.clone()])
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum();
            for j in row {
                dx[j] = T::from_f64(y[j].as_f64() * (g[j].as_f64() - dotp));
            }
        }
        vec![Some(dx)]
    }
}

/// Recorded softmax over the last dimension of `[rows, classes]`.
pub fn softmax_op<T: Scalar>(tape: &mut Tape<T>, logits: Var) -> Result<Var> {
    let out = softmax(tape.value(logits))?;
    let cols = out.shape()[1];
    Ok(tape.record(out, &[logits], SoftmaxOp { cols }))
}

// ---------------------------------------------------------------------------
// Losses

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

impl Reduction {
    fn factor(self, batch: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / batch as f64,
            Reduction::Sum => 1.0,
        }
    }
}

struct CrossEntropyOp {
    probs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
    factor: f64,
}

impl<T: Scalar> BackwardOp<T> for CrossEntropyOp {
    fn kind(&self) -> &'static str {
        "cross_entropy"
    }
    fn grads(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let scale = g[0].as_f64() * self.factor;
        let c = self.classes;
        let mut dx: Vec<T> = self.probs.iter().map(|&p| T::from_f64(p * scale)).collect();
        for (r, &y) in self.labels.iter().enumerate() {
            dx[r * c + y] = T::from_f64((self.probs[r * c + y] - 1.0) * scale);
        }
        vec![Some(dx)]
    }
}

/// Per-row `-ln softmax(logits)[label]`, reduced over the batch.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    reduction: Reduction,
) -> Result<Var> {
    let (b, c) = as_matrix(tape.shape(logits), "cross_entropy")?;
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "cross_entropy: {b} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Shape(format!(
            "cross_entropy: label {bad} out of range for {c} classes"
        )));
    }
    let x = tape.value(logits).data();
    let mut logp = vec![0.0; c];
    let mut probs = Vec::with_capacity(b * c);
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        log_softmax_row(&x[r * c..(r + 1) * c], &mut logp);
        total -= logp[y];
        probs.extend(logp.iter().map(|l| l.exp()));
    }
    let factor = reduction.factor(b);
    let out = Tensor::scalar(T::from_f64(total * factor));
    Ok(tape.record(
        out,
        &[logits],
        CrossEntropyOp {
            probs,
            labels: labels.to_vec(),
            classes: c,
            factor,
        },
    ))
}

/// Mean cross-entropy of a batch of logits without a tape.
pub fn cross_entropy_value<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = cross_entropy(&mut tape, l, labels, Reduction::Mean)?;
    Ok(tape.value(loss).data()[0].as_f64())
}

/// Per-row cross-entropy losses without a tape.
pub fn cross_entropy_rows<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>> {
    let (b, c) = as_matrix(logits.shape(), "cross_entropy")?;
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{b} logit rows but {} labels",
            labels.len()
        )));
    }
    let mut logp = vec![0.0; c];
    labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            if y >= c {
                return Err(Error::Shape(format!(
                    "label {y} out of range for {c} classes"
                )));
            }
            log_softmax_row(&logits.data()[r * c..(r + 1) * c], &mut logp);
            Ok(-logp[y])
        })
        .collect()
}

struct KlOp {
    p: Vec<f64>,
    /// `ln p - ln max(q, floor)`, zero where `p` underflowed.
    log_ratio: Vec<f64>,
    q: Vec<f64>,
    q_floored: Vec<bool>,
    classes: usize,
    factor: f64,
}

impl<T: Scalar> BackwardOp<T> for KlOp {
    fn kind(&self) -> &'static str {
        "kl_divergence"
    }
    fn grads(
        &self,
        _: &[&Tensor<T>],
        _: &Tensor<T>,
        g: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>> {
        let scale = g[0].as_f64() * self.factor;
        let c = self.classes;
        let rows = self.p.len() / c;
        let dp = needs[0].then(|| {
            let mut d = Vec::with_capacity(self.p.len());
            for r in 0..rows {
                let row = r * c..(r + 1) * c;
                let mean: f64 = self.p[row.clone()]
                    .iter()
                    .zip(&self.log_ratio[row.clone()])
                    .map(|(p, l)| p * l)
                    .sum();
                for j in row {
                    d.push(T::from_f64(scale * self.p[j] * (self.log_ratio[j] - mean)));
                }
            }
            d
        });
        let dq = needs[1].then(|| {
            let mut d = Vec::with_capacity(self.q.len());
            for r in 0..rows {
                let row = r * c..(r + 1) * c;
                let live_mass: f64 = row
                    .clone()
                    .filter(|&i| !self.q_floored[i])
                    .map(|i| self.p[i])
                    .sum();
                for j in row {
                    let own = if self.q_floored[j] { 0.0 } else { self.p[j] };
                    d.push(T::from_f64(scale * (self.q[j] * live_mass - own)));
                }
            }
            d
        });
        vec![dp, dq]
    }
}

/// Batch mean of `KL(softmax(p_logits) || softmax(q_logits))`.
///
/// Gradients flow into whichever argument requires one; detach an argument on
/// the tape to hold it constant.
pub fn kl_divergence_logits<T: Scalar>(
    tape: &mut Tape<T>,
    p_logits: Var,
    q_logits: Var,
) -> Result<Var> {
    let (b, c) = as_matrix(tape.shape(p_logits), "kl_divergence")?;
    if tape.shape(q_logits) != [b, c] {
        return Err(Error::Shape(format!(
            "kl_divergence of {:?} and {:?}",
            tape.shape(p_logits),
            tape.shape(q_logits)
        )));
    }
    let pl = tape.value(p_logits).data();
    let ql = tape.value(q_logits).data();
    let floor_ln = KL_LOG_FLOOR.ln();
    let mut p = Vec::with_capacity(b * c);
    let mut q = Vec::with_capacity(b * c);
    let mut log_ratio = Vec::with_capacity(b * c);
    let mut q_floored = Vec::with_capacity(b * c);
    let mut ln_p = vec![0.0; c];
    let mut ln_q = vec![0.0; c];
    let mut total = 0.0;
    for r in 0..b {
        log_softmax_row(&pl[r * c..(r + 1) * c], &mut ln_p);
        log_softmax_row(&ql[r * c..(r + 1) * c], &mut ln_q);
        for j in 0..c {
            let pj = ln_p[j].exp();
            let floored = ln_q[j] < floor_ln;
            let lq = if floored { floor_ln } else { ln_q[j] };
            let ratio = if pj > 0.0 { ln_p[j] - lq } else { 0.0 };
            total += pj * ratio;
            p.push(pj);
            q.push(ln_q[j].exp());
            log_ratio.push(ratio);
            q_floored.push(floored);
        }
    }
    let factor = 1.0 / b as f64;
    let out = Tensor::scalar(T::from_f64(total * factor));
    Ok(tape.record(
        out,
        &[p_logits, q_logits],
        KlOp {
            p,
            log_ratio,
            q,
            q_floored,
            classes: c,
            factor,
        },
    ))
}
