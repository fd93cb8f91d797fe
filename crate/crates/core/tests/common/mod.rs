//! Finite-difference cases and naive oracles shared by the integration
//! and acceptance suites. Each gradient case draws a random shape from the
//! generator and returns the worst relative error it saw, or a description
//! of the failure.
#![allow(dead_code)]

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfn::fusion::{fuse_backward, FusionParams, FusionType};
use tfn::gradcheck::{central_diff, grads_close, rel_error};
use tfn::layers::*;
use tfn::sincfilter::{sinc_backward, sinc_forward, SincFilterBank};

pub const GRAD_TOL: f64 = 1e-4;
pub const SINC_TOL: f64 = 1e-3;
/// Absolute slack for gradients that vanish identically (biases ahead of
/// batch statistics), where differences only return rounding noise.
pub const ZERO_GRAD_ATOL: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted(y: &Tensor, w: &Tensor) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn with_data(t: &Tensor, v: &[f64]) -> Tensor {
    Tensor::new(t.shape().to_vec(), v.to_vec()).unwrap()
}

/// Records the worst error and fails if it exceeds `tol`.
struct Check {
    worst: f64,
    shape: String,
}

impl Check {
    fn new(shape: String) -> Self {
        Self { worst: 0.0, shape }
    }

    fn rel(&mut self, what: &str, analytic: &[f64], numeric: &[f64], tol: f64) -> Result<(), String> {
        let e = rel_error(analytic, numeric);
        self.worst = self.worst.max(e);
        if e < tol {
            Ok(())
        } else {
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            Err(format!(
                "{what} at {}: relative error {e:.3e} >= {tol:e} (|analytic| {:.3e}, |numeric| {:.3e})",
                self.shape,
                norm(analytic),
                norm(numeric)
            ))
        }
    }

    fn close(&mut self, what: &str, analytic: &[f64], numeric: &[f64], tol: f64) -> Result<(), String> {
        if grads_close(analytic, numeric, tol, ZERO_GRAD_ATOL) {
            let e = rel_error(analytic, numeric);
            let norm = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                self.worst = self.worst.max(e);
            }
            Ok(())
        } else {
            Err(format!(
                "{what} at {}: relative error {:.3e} >= {tol:e}",
                self.shape,
                rel_error(analytic, numeric)
            ))
        }
    }
}

pub fn conv1d_case(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let batch = rng.random_range(1..=3);
    let in_ch = rng.random_range(1..=4);
    let out_ch = rng.random_range(1..=5);
    let kernel = rng.random_range(1..=7);
    let stride = rng.random_range(1..=3);
    let len = kernel + rng.random_range(0..=20);
    let mut c = Check::new(format!("conv1d b{batch} ci{in_ch} co{out_ch} k{kernel} s{stride} l{len}"));
    let x = rand_tensor(rng, &[batch, in_ch, len]);
    let p = Conv1dParams::new(rand_tensor(rng, &[out_ch, in_ch, kernel]), rand_tensor(rng, &[out_ch]), stride).unwrap();
    let out_len = conv_out_len(len, kernel, stride).unwrap();
    let w = rand_tensor(rng, &[batch, out_ch, out_len]);
    let g = conv1d_backward(&x, &p, &w).unwrap();
    let loss = |x: &Tensor, p: &Conv1dParams| weighted(&conv1d_forward(x, p).unwrap(), &w);
    let h = 1e-6;
    c.rel("conv1d dx", g.x.data(), &central_diff(x.data(), h, |v| loss(&with_data(&x, v), &p)), GRAD_TOL)?;
    c.rel(
        "conv1d dW",
        g.weight.data(),
        &central_diff(p.weight.data(), h, |v| {
            let mut q = p.clone();
            q.weight = with_data(&p.weight, v);
            loss(&x, &q)
        }),
        GRAD_TOL,
    )?;
    c.rel(
        "conv1d db",
        g.bias.data(),
        &central_diff(p.bias.data(), h, |v| {
            let mut q = p.clone();
            q.bias = with_data(&p.bias, v);
            loss(&x, &q)
        }),
        GRAD_TOL,
    )?;
    Ok(c.worst)
}

pub fn batchnorm_case(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let training = rng.random_bool(0.5);
    let batch = rng.random_range(2..=4);
    let ch = rng.random_range(1..=4);
    let len = rng.random_range(1..=6);
    let shape: Vec<usize> = if rng.random_bool(0.5) { vec![batch, ch, len] } else { vec![batch, ch] };
    let mode = if training { Mode::Training } else { Mode::Inference };
    let mut c = Check::new(format!("batchnorm {mode:?} {shape:?}"));
    let x = rand_tensor(rng, &shape);
    let mut p = BatchNormParams::new(ch);
    p.mode = mode;
    p.gamma = rand_tensor(rng, &[ch]);
    p.beta = rand_tensor(rng, &[ch]);
    p.running_mean = rand_tensor(rng, &[ch]);
    p.running_var = Tensor::new(vec![ch], (0..ch).map(|_| rng.random_range(0.5..2.0)).collect()).unwrap();
    let w = rand_tensor(rng, &shape);
    let g = batchnorm_backward(&x, &p, &w).unwrap();
    let loss = |x: &Tensor, p: &BatchNormParams| weighted(&batchnorm_normalize(x, p).unwrap().0, &w);
    let h = 1e-6;
    c.rel("bn dx", g.x.data(), &central_diff(x.data(), h, |v| loss(&with_data(&x, v), &p)), GRAD_TOL)?;
    c.rel(
        "bn dgamma",
        g.gamma.data(),
        &central_diff(p.gamma.data(), h, |v| {
            let mut q = p.clone();
            q.gamma = with_data(&p.gamma, v);
            loss(&x, &q)
        }),
        GRAD_TOL,
    )?;
    c.rel(
        "bn dbeta",
        g.beta.data(),
        &central_diff(p.beta.data(), h, |v| {
            let mut q = p.clone();
            q.beta = with_data(&p.beta, v);
            loss(&x, &q)
        }),
        GRAD_TOL,
    )?;
    Ok(c.worst)
}

pub fn linear_case(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let batch = rng.random_range(1..=5);
    let inp = rng.random_range(1..=8);
    let out = rng.random_range(1..=8);
    let mut c = Check::new(format!("linear b{batch} {inp}->{out}"));
    let x = rand_tensor(rng, &[batch, inp]);
    let p = LinearParams::new(rand_tensor(rng, &[out, inp]), rand_tensor(rng, &[out])).unwrap();
    let w = rand_tensor(rng, &[batch, out]);
    let g = linear_backward(&x, &p, &w).unwrap();
    let loss = |x: &Tensor, p: &LinearParams| weighted(&linear_forward(x, p).unwrap(), &w);
    let h = 1e-6;
    c.rel("linear dx", g.x.data(), &central_diff(x.data(), h, |v| loss(&with_data(&x, v), &p)), GRAD_TOL)?;
    c.rel(
        "linear dW",
        g.weight.data(),
        &central_diff(p.weight.data(), h, |v| {
            let mut q = p.clone();
            q.weight = with_data(&p.weight, v);
            loss(&x, &q)
        }),
        GRAD_TOL,
    )?;
    c.rel(
        "linear db",
        g.bias.data(),
        &central_diff(p.bias.data(), h, |v| {
            let mut q = p.clone();
            q.bias = with_data(&p.bias, v);
            loss(&x, &q)
        }),
        GRAD_TOL,
    )?;
    Ok(c.worst)
}

pub fn softmax_xent_case(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let batch = rng.random_range(1..=6);
    let k = rng.random_range(2..=10);
    let mut c = Check::new(format!("softmax_xent b{batch} k{k}"));
    let logits = Tensor::new(vec![batch, k], (0..batch * k).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..k)).collect();
    let (_, g) = softmax_xent(&logits, &labels).unwrap();
    let num = central_diff(logits.data(), 1e-6, |v| softmax_xent(&with_data(&logits, v), &labels).unwrap().0);
    c.rel("softmax_xent dlogits", g.data(), &num, GRAD_TOL)?;
    Ok(c.worst)
}

pub fn sinc_case(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let sr: u32 = if rng.random_bool(0.5) { 8000 } else { 16000 };
    let nyq = sr as f64 / 2.0;
    let n = rng.random_range(1..=5);
    let kernel = 2 * rng.random_range(2..=20) + 1;
    let batch = rng.random_range(1..=2);
    let len = kernel + rng.random_range(0..=30);
    let mut c = Check::new(format!("sinc n{n} k{kernel} sr{sr} b{batch} l{len}"));
    let mut bank = SincFilterBank::new(n, kernel, sr).unwrap();
    // keep clear of the clamps, where the cutoffs are not differentiable
    let bands: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let f1 = rng.random_range(150.0..nyq * 0.6);
            let f2 = rng.random_range(f1 + 150.0..nyq - 100.0);
            (f1, f2)
        })
        .collect();
    bank.set_cutoffs_hz(&bands).unwrap();
    let x = rand_tensor(rng, &[batch, 1, len]);
    let out_len = len - kernel + 1;
    let w = rand_tensor(rng, &[batch, n, out_len]);
    let g = sinc_backward(&x, &bank, &w).unwrap();
    let loss = |x: &Tensor, b: &SincFilterBank| weighted(&sinc_forward(x, b).unwrap(), &w);
    c.rel("sinc dx", g.x.data(), &central_diff(x.data(), 1e-6, |v| loss(&with_data(&x, v), &bank)), GRAD_TOL)?;
    // raw cutoffs are in cycles/sample; 1e-4 Hz steps
    let h = 1e-4 / sr as f64;
    let n1 = central_diff(bank.f1_raw.data(), h, |v| {
        let mut b = bank.clone();
        b.f1_raw = with_data(&bank.f1_raw, v);
        loss(&x, &b)
    });
    c.rel("sinc d f1_raw", g.f1_raw.data(), &n1, SINC_TOL)?;
    let nb = central_diff(bank.band_raw.data(), h, |v| {
        let mut b = bank.clone();
        b.band_raw = with_data(&bank.band_raw, v);
        loss(&x, &b)
    });
    c.rel("sinc d band_raw", g.band_raw.data(), &nb, SINC_TOL)?;
    Ok(c.worst)
}

pub fn fusion_case(rng: &mut ChaCha8Rng, ft: FusionType) -> Result<f64, String> {
    // two-sample batch statistics map every feature to ±1, leaving a flat
    // function whose gradients sit at the finite-difference noise floor
    let batch = rng.random_range(3..=6);
    let d_t = rng.random_range(1..=6);
    let d_f = rng.random_range(1..=6);
    let out = 2 * rng.random_range(1..=4);
    let hidden = 2 * rng.random_range(1..=4);
    let mut c = Check::new(format!("{ft} fusion b{batch} dt{d_t} df{d_f} out{out} hidden{hidden}"));
    let mut p = FusionParams::new(rng, ft, d_t, d_f, out, Some(hidden)).unwrap();
    if rng.random_bool(0.3) {
        p.set_mode(Mode::Inference);
        // non-trivial running statistics
        for b in p.buffers_mut() {
            for v in b.data_mut() {
                *v = rng.random_range(0.5..1.5);
            }
        }
    }
    let t = rand_tensor(rng, &[batch, d_t]);
    let f = rand_tensor(rng, &[batch, d_f]);
    let w = rand_tensor(rng, &[batch, out]);
    let loss = |p: &FusionParams, t: &Tensor, f: &Tensor| weighted(&p.forward(t, f).unwrap().0, &w);
    let g = fuse_backward(&t, &f, &p, &w).unwrap();
    let h = 1e-6;
    c.rel("fusion dt", g.t.data(), &central_diff(t.data(), h, |v| loss(&p, &with_data(&t, v), &f)), GRAD_TOL)?;
    c.rel("fusion df", g.f.data(), &central_diff(f.data(), h, |v| loss(&p, &t, &with_data(&f, v))), GRAD_TOL)?;
    let names: Vec<String> = p.named_params().into_iter().map(|(n, _)| n).collect();
    for (k, gk) in g.params.iter().enumerate() {
        let base = p.named_params()[k].1.data().to_vec();
        let num = central_diff(&base, h, |v| {
            let mut q = p.clone();
            q.params_mut()[k].data_mut().copy_from_slice(v);
            loss(&q, &t, &f)
        });
        c.close(&names[k], gk.data(), &num, GRAD_TOL)?;
    }
    Ok(c.worst)
}

// ------------------------------------------------------------------ oracles

/// Valid, strided convolution written as the defining quadruple loop.
pub fn naive_conv1d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Vec<f64> {
    let (bs, ci, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let ol = (len - k) / stride + 1;
    let mut y = vec![0.0; bs * co * ol];
    for n in 0..bs {
        for o in 0..co {
            for t in 0..ol {
                let mut s = b.data()[o];
                for i in 0..ci {
                    for j in 0..k {
                        s += w.data()[(o * ci + i) * k + j] * x.data()[(n * ci + i) * len + t * stride + j];
                    }
                }
                y[(n * co + o) * ol + t] = s;
            }
        }
    }
    y
}

pub fn naive_linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (bs, inp) = (x.shape()[0], x.shape()[1]);
    let out = w.shape()[0];
    let mut y = vec![0.0; bs * out];
    for n in 0..bs {
        for o in 0..out {
            let mut s = b.data()[o];
            for i in 0..inp {
                s += w.data()[o * inp + i] * x.data()[n * inp + i];
            }
            y[n * out + o] = s;
        }
    }
    y
}

/// |X[k]| of a real frame zero-padded to `n_fft`, for `k <= n_fft / 2`.
pub fn naive_dft_magnitude(frame: &[f64], n_fft: usize) -> Vec<f64> {
    (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &v) in frame.iter().enumerate() {
                let a = -2.0 * PI * (k * n) as f64 / n_fft as f64;
                re += v * a.cos();
                im += v * a.sin();
            }
            re.hypot(im)
        })
        .collect()
}

/// Orthonormal DCT-II, first `n_out` coefficients.
pub fn naive_dct(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .sum();
            s * if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
        })
        .collect()
}

/// |H(f)| of a zero-phase symmetric FIR filter on the given grid.
pub fn magnitude_response(taps: &[f64], sample_rate: f64, freqs: &[f64]) -> Vec<f64> {
    let c = (taps.len() / 2) as f64;
    freqs
        .iter()
        .map(|f| {
            let om = 2.0 * PI * f / sample_rate;
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &h) in taps.iter().enumerate() {
                let a = om * (n as f64 - c);
                re += h * a.cos();
                im -= h * a.sin();
            }
            re.hypot(im)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A model small enough to train for several epochs in well under a second.
pub fn small_model_config(n_speakers: usize) -> tfn::model::ModelConfig {
    use tfn::dsp::MfccConfig;
    use tfn::model::{ConvSpec, ModelConfig};
    ModelConfig {
        n_sinc_filters: 6,
        sinc_kernel_len: 31,
        time_conv_blocks: vec![ConvSpec::new(6, 5, 1)],
        freq_conv_blocks: vec![ConvSpec::new(6, 3, 1)],
        class_space_dim: 8,
        n_speakers,
        mfcc: MfccConfig {
            frame_len_ms: 4.0,
            hop_ms: 2.0,
            n_fft: 64,
            n_mels: 10,
            n_coeffs: 6,
            ..MfccConfig::default()
        },
        chunk_ms: 20.0,
        chunk_shift_ms: 10.0,
        ..tfn::model::ModelConfig::default()
    }
}
