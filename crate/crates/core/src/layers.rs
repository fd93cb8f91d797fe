//! Differentiable building blocks with hand-written backward passes.
//!
//! Activations are laid out `[batch × channels × length]` (or
//! `[batch × features]` for dense layers), row-major, in `f64`.

use rand::Rng;

use crate::error::{param_err, shape_err, Result, TfnError};

/// Dense n-dimensional array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return shape_err(format!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient slot, allocated as zeros on first access.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        for (a, b) in self.grad_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    fn dims3(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [b, c, l] => Ok((b, c, l)),
            [b, c] => Ok((b, c, 1)),
            _ => shape_err(format!("{what}: expected 2-D or 3-D input, got {:?}", self.shape)),
        }
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [b, f] => Ok((b, f)),
            _ => shape_err(format!("{what}: expected [batch × features], got {:?}", self.shape)),
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return shape_err(format!("{what}: shape {:?} vs {:?}", a.shape, b.shape));
    }
    Ok(())
}

/// Four-lane dot product; fixed summation order.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Uniform He initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
        grad: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

// ---------------------------------------------------------------- conv1d

/// Valid (unpadded) 1-D convolution, cross-correlation convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dParams {
    /// `[out_ch × in_ch × kernel]`.
    pub weight: Tensor,
    /// `[out_ch]`.
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv1dParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let p = Self {
            weight,
            bias,
            stride,
        };
        p.dims()?;
        Ok(p)
    }

    /// (out_ch, in_ch, kernel)
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        let (o, i, k) = match self.weight.shape[..] {
            [o, i, k] => (o, i, k),
            _ => return shape_err(format!("conv weight must be 3-D, got {:?}", self.weight.shape)),
        };
        if self.bias.shape != [o] {
            return shape_err(format!("conv bias {:?} does not match {o} filters", self.bias.shape));
        }
        if self.stride == 0 {
            return param_err("conv stride must be >= 1");
        }
        Ok((o, i, k))
    }

    pub fn out_len(&self, length: usize) -> Result<usize> {
        let (_, _, k) = self.dims()?;
        conv_out_len(length, k, self.stride)
    }
}

const TILE_F: usize = 8;
const TILE_T: usize = 16;

/// Accumulates `nf` valid cross-correlations of `x`:
/// `out[f·out_stride + t] += Σ_k w[f·w_stride + k]·x[t + k]` for
/// `t < n_out`, `k < klen`. Register-tiled over kernels × 8 outputs.
#[allow(clippy::too_many_arguments)]
fn xcorr_block(
    x: &[f64],
    w: &[f64],
    w_stride: usize,
    klen: usize,
    nf: usize,
    out: &mut [f64],
    out_stride: usize,
    n_out: usize,
) {
    debug_assert!(x.len() >= n_out + klen - 1);
    let mut f0 = 0;
    while f0 + TILE_F <= nf {
        xcorr_tile::<TILE_F>(x, &w[f0 * w_stride..], w_stride, klen, &mut out[f0 * out_stride..], out_stride, n_out);
        f0 += TILE_F;
    }
    while f0 < nf {
        xcorr_tile::<1>(x, &w[f0 * w_stride..], w_stride, klen, &mut out[f0 * out_stride..], out_stride, n_out);
        f0 += 1;
    }
}

fn xcorr_tile<const F: usize>(
    x: &[f64],
    w: &[f64],
    w_stride: usize,
    klen: usize,
    out: &mut [f64],
    out_stride: usize,
    n_out: usize,
) {
    let rows: [&[f64]; F] = std::array::from_fn(|f| &w[f * w_stride..][..klen]);
    let mut t0 = 0;
    while t0 + TILE_T <= n_out {
        let xs = &x[t0..t0 + klen + TILE_T - 1];
        let mut acc = [[0.0f64; TILE_T]; F];
        for k in 0..klen {
            let xv: &[f64; TILE_T] = xs[k..k + TILE_T].try_into().expect("tile");
            for f in 0..F {
                let wk = rows[f][k];
                for j in 0..TILE_T {
                    acc[f][j] += wk * xv[j];
                }
            }
        }
        for (f, a) in acc.iter().enumerate() {
            let o = &mut out[f * out_stride + t0..][..TILE_T];
            for (d, v) in o.iter_mut().zip(a) {
                *d += v;
            }
        }
        t0 += TILE_T;
    }
    for (f, row) in rows.iter().enumerate() {
        let o = &mut out[f * out_stride..];
        for t in t0..n_out {
            o[t] += dot(row, &x[t..t + klen]);
        }
    }
}

pub fn conv_out_len(length: usize, kernel: usize, stride: usize) -> Result<usize> {
    if length < kernel {
        return shape_err(format!("input length {length} shorter than kernel {kernel}"));
    }
    Ok((length - kernel) / stride + 1)
}

pub fn conv1d_forward(x: &Tensor, p: &Conv1dParams) -> Result<Tensor> {
    let (out_ch, in_ch, kernel) = p.dims()?;
    let (batch, xc, len) = x.dims3("conv1d")?;
    if xc != in_ch {
        return shape_err(format!("conv1d expects {in_ch} input channels, got {xc}"));
    }
    let out_len = conv_out_len(len, kernel, p.stride)?;
    let s = p.stride;
    let w = &p.weight.data;
    let mut y = vec![0.0; batch * out_ch * out_len];
    for b in 0..batch {
        let yb = &mut y[b * out_ch * out_len..][..out_ch * out_len];
        for (o, row) in yb.chunks_exact_mut(out_len).enumerate() {
            row.fill(p.bias.data[o]);
        }
        for i in 0..in_ch {
            let xrow = &x.data[(b * in_ch + i) * len..][..len];
            if s == 1 {
                xcorr_block(xrow, &w[i * kernel..], in_ch * kernel, kernel, out_ch, yb, out_len, out_len);
                continue;
            }
            for o in 0..out_ch {
                let yrow = &mut yb[o * out_len..][..out_len];
                let wrow = &w[(o * in_ch + i) * kernel..][..kernel];
                for (k, &wk) in wrow.iter().enumerate() {
                    for (t, yt) in yrow.iter_mut().enumerate() {
                        *yt += wk * xrow[t * s + k];
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, out_ch, out_len], y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dGrads {
    pub x: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn conv1d_backward(x: &Tensor, p: &Conv1dParams, grad_out: &Tensor) -> Result<Conv1dGrads> {
    let (gx, gw, gb) = conv1d_backward_parts(x, p, grad_out, true)?;
    Ok(Conv1dGrads {
        x: gx.expect("input gradient requested"),
        weight: gw,
        bias: gb,
    })
}

/// Conv backward; the input gradient is skipped when `need_input` is false.
pub(crate) fn conv1d_backward_parts(
    x: &Tensor,
    p: &Conv1dParams,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (out_ch, in_ch, kernel) = p.dims()?;
    let (batch, xc, len) = x.dims3("conv1d_backward")?;
    if xc != in_ch {
        return shape_err(format!("conv1d expects {in_ch} input channels, got {xc}"));
    }
    let out_len = conv_out_len(len, kernel, p.stride)?;
    let expect = [batch, out_ch, out_len];
    if grad_out.shape != expect {
        return shape_err(format!(
            "conv1d grad_out {:?} does not match output {expect:?}",
            grad_out.shape
        ));
    }
    let s = p.stride;
    let g = &grad_out.data;
    let w = &p.weight.data;
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; out_ch];
    let mut gx = if need_input { vec![0.0; x.data.len()] } else { Vec::new() };
    if s == 1 {
        // dW[o,i,k] = Σ_t g[o,t]·x[i,t+k]: a correlation of x with g.
        // dX[i,u] = Σ_o Σ_k W[o,i,k]·g[o,u-k]: a correlation of the
        // zero-padded g with the flipped kernel.
        let mut flipped = vec![0.0; w.len()];
        for (dst, src) in flipped.chunks_exact_mut(kernel).zip(w.chunks_exact(kernel)) {
            for (d, v) in dst.iter_mut().zip(src.iter().rev()) {
                *d = *v;
            }
        }
        let mut padded = vec![0.0; out_len + 2 * (kernel - 1)];
        for b in 0..batch {
            let gbatch = &g[b * out_ch * out_len..][..out_ch * out_len];
            for (o, grow) in gbatch.chunks_exact(out_len).enumerate() {
                gb[o] += grow.iter().sum::<f64>();
            }
            for i in 0..in_ch {
                let xrow = &x.data[(b * in_ch + i) * len..][..len];
                xcorr_block(xrow, gbatch, out_len, out_len, out_ch, &mut gw[i * kernel..], in_ch * kernel, kernel);
            }
            if need_input {
                let gxb = &mut gx[b * in_ch * len..][..in_ch * len];
                for (o, grow) in gbatch.chunks_exact(out_len).enumerate() {
                    padded[kernel - 1..kernel - 1 + out_len].copy_from_slice(grow);
                    xcorr_block(&padded, &flipped[o * in_ch * kernel..], kernel, kernel, in_ch, gxb, len, len);
                }
            }
        }
    } else {
        let mut strided = vec![0.0; out_len];
        for b in 0..batch {
            for o in 0..out_ch {
                let grow = &g[(b * out_ch + o) * out_len..][..out_len];
                gb[o] += grow.iter().sum::<f64>();
                for i in 0..in_ch {
                    let xoff = (b * in_ch + i) * len;
                    let xrow = &x.data[xoff..xoff + len];
                    let woff = (o * in_ch + i) * kernel;
                    for k in 0..kernel {
                        for (t, v) in strided.iter_mut().enumerate() {
                            *v = xrow[t * s + k];
                        }
                        gw[woff + k] += dot(grow, &strided);
                        if need_input {
                            let wk = w[woff + k];
                            for (t, gt) in grow.iter().enumerate() {
                                gx[xoff + t * s + k] += wk * gt;
                            }
                        }
                    }
                }
            }
        }
    }
    let gx = if need_input {
        Some(Tensor::new(x.shape.clone(), gx)?)
    } else {
        None
    };
    Ok((
        gx,
        Tensor::new(p.weight.shape.clone(), gw)?,
        Tensor::new(vec![out_ch], gb)?,
    ))
}

// ------------------------------------------------------------- batchnorm

/// Per-channel batch normalization over (batch, length).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    pub mode: Mode,
}

impl BatchNormParams {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    /// gamma = 1, beta = 0, running stats (0, 1), training mode.
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            mode: Mode::Training,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Per-channel mean and biased variance over (batch, length).
fn channel_stats(x: &Tensor, batch: usize, ch: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * len) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for b in 0..batch {
            s += x.data[(b * ch + c) * len..][..len].iter().sum::<f64>();
        }
        let m = s / n;
        let mut v = 0.0;
        for b in 0..batch {
            v += x.data[(b * ch + c) * len..][..len]
                .iter()
                .map(|&xi| (xi - m) * (xi - m))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = v / n;
    }
    (mean, var)
}

fn bn_check(x: &Tensor, p: &BatchNormParams) -> Result<(usize, usize, usize)> {
    let (batch, ch, len) = x.dims3("batchnorm")?;
    if ch != p.channels() {
        return shape_err(format!("batchnorm has {} channels, input has {ch}", p.channels()));
    }
    if p.mode == Mode::Training && batch * len < 2 {
        return Err(TfnError::DegenerateBatch(format!(
            "training-mode batchnorm needs at least 2 values per channel, got {}",
            batch * len
        )));
    }
    Ok((batch, ch, len))
}

/// Per-channel statistics a normalization pass used.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormParams {
    /// Folds batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BnStats) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean.data[c] = (1.0 - m) * self.running_mean.data[c] + m * stats.mean[c];
            self.running_var.data[c] = (1.0 - m) * self.running_var.data[c] + m * stats.var[c];
        }
    }
}

/// Normalizes `x` without touching the running estimates. Training mode
/// uses batch statistics (returned), inference mode the running ones.
pub fn batchnorm_normalize(x: &Tensor, p: &BatchNormParams) -> Result<(Tensor, BnStats)> {
    let (batch, ch, len) = bn_check(x, p)?;
    let (mean, var) = match p.mode {
        Mode::Training => channel_stats(x, batch, ch, len),
        Mode::Inference => (p.running_mean.data.clone(), p.running_var.data.clone()),
    };
    let mut y = x.data.clone();
    for c in 0..ch {
        let inv = 1.0 / (var[c] + p.eps).sqrt();
        let (g, bt) = (p.gamma.data[c], p.beta.data[c]);
        for b in 0..batch {
            for v in &mut y[(b * ch + c) * len..][..len] {
                *v = g * (*v - mean[c]) * inv + bt;
            }
        }
    }
    Ok((Tensor::new(x.shape.clone(), y)?, BnStats { mean, var }))
}

/// Normalizes `x`; in training mode also folds the batch statistics into
/// the running estimates.
pub fn batchnorm_forward(x: &Tensor, p: &mut BatchNormParams) -> Result<Tensor> {
    let (y, stats) = batchnorm_normalize(x, p)?;
    if p.mode == Mode::Training {
        p.update_running(&stats);
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub x: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Backward of [`batchnorm_forward`]. Training mode differentiates through
/// the batch mean and variance, recomputed from `x`.
pub fn batchnorm_backward(
    x: &Tensor,
    p: &BatchNormParams,
    grad_out: &Tensor,
) -> Result<BatchNormGrads> {
    let (batch, ch, len) = bn_check(x, p)?;
    same_shape(x, grad_out, "batchnorm_backward")?;
    let (mean, var) = match p.mode {
        Mode::Training => channel_stats(x, batch, ch, len),
        Mode::Inference => (p.running_mean.data.clone(), p.running_var.data.clone()),
    };
    let n = (batch * len) as f64;
    let mut gx = vec![0.0; x.data.len()];
    let mut gg = vec![0.0; ch];
    let mut gbeta = vec![0.0; ch];
    for c in 0..ch {
        let inv = 1.0 / (var[c] + p.eps).sqrt();
        let gamma = p.gamma.data[c];
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for b in 0..batch {
            let off = (b * ch + c) * len;
            for t in 0..len {
                let xhat = (x.data[off + t] - mean[c]) * inv;
                sum_g += grad_out.data[off + t];
                sum_gx += grad_out.data[off + t] * xhat;
            }
        }
        gbeta[c] = sum_g;
        gg[c] = sum_gx;
        for b in 0..batch {
            let off = (b * ch + c) * len;
            for t in 0..len {
                let g = grad_out.data[off + t];
                gx[off + t] = match p.mode {
                    Mode::Training => {
                        let xhat = (x.data[off + t] - mean[c]) * inv;
                        gamma * inv * (g - sum_g / n - xhat * sum_gx / n)
                    }
                    Mode::Inference => gamma * inv * g,
                };
            }
        }
    }
    Ok(BatchNormGrads {
        x: Tensor::new(x.shape.clone(), gx)?,
        gamma: Tensor::new(vec![ch], gg)?,
        beta: Tensor::new(vec![ch], gbeta)?,
    })
}

// --------------------------------------------------------- elementwise

pub fn relu_forward(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        grad: None,
    }
}

/// Passes gradient where `x > 0`; the subgradient at 0 is 0.
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape(x, grad_out, "relu_backward")?;
    Tensor::new(
        x.shape.clone(),
        x.data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    )
}

pub fn abs_forward(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v.abs()).collect(),
        grad: None,
    }
}

/// Sign subgradient with sign(0) = 0.
pub fn abs_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    same_shape(x, grad_out, "abs_backward")?;
    Tensor::new(
        x.shape.clone(),
        x.data
            .iter()
            .zip(&grad_out.data)
            .map(|(&v, &g)| sign(v) * g)
            .collect(),
    )
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Max pooling along the last axis. Returns the pooled tensor and, per
/// output element, the flat input index that won (first on ties).
pub fn maxpool1d_forward(x: &Tensor, width: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    if width == 0 || stride == 0 {
        return param_err("pool width and stride must be >= 1");
    }
    let (batch, ch, len) = x.dims3("maxpool1d")?;
    let out_len = conv_out_len(len, width, stride)?;
    let mut y = Vec::with_capacity(batch * ch * out_len);
    let mut idx = Vec::with_capacity(batch * ch * out_len);
    for row in 0..batch * ch {
        let base = row * len;
        for t in 0..out_len {
            let start = base + t * stride;
            let mut best = start;
            for j in start + 1..start + width {
                if x.data[j] > x.data[best] {
                    best = j;
                }
            }
            y.push(x.data[best]);
            idx.push(best);
        }
    }
    Ok((Tensor::new(vec![batch, ch, out_len], y)?, idx))
}

pub fn maxpool1d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_out.numel() {
        return shape_err("maxpool grad_out does not match recorded argmax");
    }
    let mut gx = vec![0.0; input_shape.iter().product()];
    for (&i, &g) in argmax.iter().zip(&grad_out.data) {
        gx[i] += g;
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// `[batch × ch × len] → [batch × ch]`, mean over time.
pub fn mean_pool_forward(x: &Tensor) -> Result<Tensor> {
    let (batch, ch, len) = x.dims3("mean_pool")?;
    let data = (0..batch * ch)
        .map(|r| x.data[r * len..(r + 1) * len].iter().sum::<f64>() / len as f64)
        .collect();
    Tensor::new(vec![batch, ch], data)
}

pub fn mean_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (batch, ch, len) = match input_shape[..] {
        [b, c, l] => (b, c, l),
        _ => return shape_err("mean_pool_backward expects a 3-D input shape"),
    };
    if grad_out.shape != [batch, ch] {
        return shape_err(format!("mean_pool grad_out {:?} vs [{batch}, {ch}]", grad_out.shape));
    }
    let mut gx = Vec::with_capacity(batch * ch * len);
    for &g in &grad_out.data {
        gx.extend(std::iter::repeat_n(g / len as f64, len));
    }
    Tensor::new(input_shape.to_vec(), gx)
}

/// Concatenates `[batch × a]` and `[batch × b]` along features.
pub fn concat_features(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ba, fa) = a.dims2("concat")?;
    let (bb, fb) = b.dims2("concat")?;
    if ba != bb {
        return shape_err(format!("concat batch mismatch {ba} vs {bb}"));
    }
    let mut out = Vec::with_capacity(ba * (fa + fb));
    for r in 0..ba {
        out.extend_from_slice(&a.data[r * fa..(r + 1) * fa]);
        out.extend_from_slice(&b.data[r * fb..(r + 1) * fb]);
    }
    Tensor::new(vec![ba, fa + fb], out)
}

/// Splits `[batch × (left + rest)]` after column `left`.
pub fn split_features(x: &Tensor, left: usize) -> Result<(Tensor, Tensor)> {
    let (batch, f) = x.dims2("split")?;
    if left == 0 || left >= f {
        return shape_err(format!("cannot split {f} features at {left}"));
    }
    let right = f - left;
    let mut a = Vec::with_capacity(batch * left);
    let mut b = Vec::with_capacity(batch * right);
    for r in 0..batch {
        a.extend_from_slice(&x.data[r * f..r * f + left]);
        b.extend_from_slice(&x.data[r * f + left..(r + 1) * f]);
    }
    Ok((Tensor::new(vec![batch, left], a)?, Tensor::new(vec![batch, right], b)?))
}

// ---------------------------------------------------------------- linear

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    /// `[out × in]`.
    pub weight: Tensor,
    /// `[out]`.
    pub bias: Tensor,
}

impl LinearParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let p = Self { weight, bias };
        p.dims()?;
        Ok(p)
    }

    /// (out, in)
    pub fn dims(&self) -> Result<(usize, usize)> {
        let (o, i) = self.weight.dims2("linear weight")?;
        if self.bias.shape != [o] {
            return shape_err(format!("linear bias {:?} does not match {o} outputs", self.bias.shape));
        }
        Ok((o, i))
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}

/// `y = x·Wᵀ + b`.
pub fn linear_forward(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    let (out, inp) = p.dims()?;
    let (batch, f) = x.dims2("linear")?;
    if f != inp {
        return shape_err(format!("linear expects {inp} features, got {f}"));
    }
    let mut y = Vec::with_capacity(batch * out);
    for b in 0..batch {
        let xr = &x.data[b * inp..(b + 1) * inp];
        for o in 0..out {
            y.push(p.bias.data[o] + dot(&p.weight.data[o * inp..(o + 1) * inp], xr));
        }
    }
    Tensor::new(vec![batch, out], y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub x: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn linear_backward(x: &Tensor, p: &LinearParams, grad_out: &Tensor) -> Result<LinearGrads> {
    let (out, inp) = p.dims()?;
    let (batch, f) = x.dims2("linear_backward")?;
    if f != inp || grad_out.shape != [batch, out] {
        return shape_err(format!(
            "linear_backward: x {:?}, grad_out {:?}, weight [{out}, {inp}]",
            x.shape, grad_out.shape
        ));
    }
    let mut gx = vec![0.0; batch * inp];
    let mut gw = vec![0.0; out * inp];
    let mut gb = vec![0.0; out];
    for b in 0..batch {
        let xr = &x.data[b * inp..(b + 1) * inp];
        let gxr = &mut gx[b * inp..(b + 1) * inp];
        for o in 0..out {
            let g = grad_out.data[b * out + o];
            gb[o] += g;
            axpy(g, xr, &mut gw[o * inp..(o + 1) * inp]);
            axpy(g, &p.weight.data[o * inp..(o + 1) * inp], gxr);
        }
    }
    Ok(LinearGrads {
        x: Tensor::new(vec![batch, inp], gx)?,
        weight: Tensor::new(vec![out, inp], gw)?,
        bias: Tensor::new(vec![out], gb)?,
    })
}

// --------------------------------------------------------------- softmax

/// Row-wise log-softmax of `[batch × classes]`.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let (batch, k) = logits.dims2("log_softmax")?;
    let mut out = Vec::with_capacity(batch * k);
    for r in 0..batch {
        let row = &logits.data[r * k..(r + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(vec![batch, k], out)
}

/// Mean cross-entropy over the batch and its gradient `(softmax − onehot)/batch`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, k) = logits.dims2("softmax_xent")?;
    if labels.len() != batch {
        return shape_err(format!("{} labels for a batch of {batch}", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return param_err(format!("label {bad} out of range for {k} classes"));
    }
    let logp = log_softmax(logits)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(batch * k);
    for (r, &label) in labels.iter().enumerate() {
        let row = &logp.data[r * k..(r + 1) * k];
        loss -= row[label];
        grad.extend(row.iter().enumerate().map(|(c, lp)| {
            let onehot = if c == label { 1.0 } else { 0.0 };
            (lp.exp() - onehot) / batch as f64
        }));
    }
    Ok((loss / batch as f64, Tensor::new(vec![batch, k], grad)?))
}
