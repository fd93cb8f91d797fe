//! Learnable band-pass filters built as the difference of two windowed
//! sinc low-pass kernels.
//!
//! Each filter owns two unconstrained parameters. Cutoffs are derived as
//!
//! ```text
//! f1 = min(f_min + |f1_raw|, nyquist - band_min)
//! f2 = min(f1 + band_min + |band_raw|, nyquist)
//! ```
//!
//! so any parameter values give `f_min <= f1 < f2 <= nyquist`. Raw
//! parameters live in units of cycles per sample (Hz / sample_rate).
//!
//! Taps are Hamming windowed, then a multiple of the window is subtracted
//! so the response at DC is exactly zero, then the filter is scaled to a
//! peak tap magnitude of 1. All three steps are differentiated.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::dsp::{hamming_window, hz_to_mel, mel_to_hz};
use crate::error::{param_err, shape_err, Result};
use crate::layers::{conv1d_backward_parts, conv1d_forward, sign, Conv1dParams, Tensor};

pub const DEFAULT_F_MIN_HZ: f64 = 50.0;
pub const DEFAULT_BAND_MIN_HZ: f64 = 50.0;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

/// Unwindowed band-pass taps for normalized cutoffs, `n = -L..=L`:
/// `2·f2·sinc(2π·f2·n) − 2·f1·sinc(2π·f1·n)`.
pub fn raw_taps(f1n: f64, f2n: f64, kernel_len: usize) -> Vec<f64> {
    let half = (kernel_len / 2) as isize;
    let mut taps = vec![0.0; kernel_len];
    for n in 0..=half {
        let nf = n as f64;
        let v = 2.0 * f2n * sinc(2.0 * PI * f2n * nf) - 2.0 * f1n * sinc(2.0 * PI * f1n * nf);
        taps[(half + n) as usize] = v;
        taps[(half - n) as usize] = v;
    }
    taps
}

#[derive(Debug, Clone, PartialEq)]
pub struct SincFilterBank {
    n_filters: usize,
    kernel_len: usize,
    pub f1_raw: Tensor,
    pub band_raw: Tensor,
    f_min_hz: f64,
    band_min_hz: f64,
    sample_rate: u32,
    pub stride: usize,
    window: Vec<f64>,
    window_sum: f64,
}

/// Derived cutoffs of one filter with the clamp state needed by backward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cutoffs {
    /// Low cutoff, cycles per sample.
    pub f1n: f64,
    /// High cutoff, cycles per sample.
    pub f2n: f64,
    low_clamped: bool,
    high_clamped: bool,
}

impl SincFilterBank {
    /// A bank with mel-spaced initial bands and default minimum frequencies.
    pub fn new(n_filters: usize, kernel_len: usize, sample_rate: u32) -> Result<Self> {
        Self::with_limits(
            n_filters,
            kernel_len,
            sample_rate,
            DEFAULT_F_MIN_HZ,
            DEFAULT_BAND_MIN_HZ,
        )
    }

    pub fn with_limits(
        n_filters: usize,
        kernel_len: usize,
        sample_rate: u32,
        f_min_hz: f64,
        band_min_hz: f64,
    ) -> Result<Self> {
        if n_filters == 0 {
            return param_err("sinc bank needs at least one filter");
        }
        if kernel_len.is_multiple_of(2) {
            return param_err(format!("sinc kernel length {kernel_len} must be odd"));
        }
        if sample_rate == 0 {
            return param_err("sample rate must be positive");
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(f_min_hz > 0.0 && band_min_hz > 0.0 && f_min_hz + band_min_hz < nyquist) {
            return param_err(format!(
                "need f_min ({f_min_hz}) > 0, band_min ({band_min_hz}) > 0 and their sum below Nyquist ({nyquist})"
            ));
        }
        let mut bank = Self {
            n_filters,
            kernel_len,
            f1_raw: Tensor::zeros(&[n_filters]),
            band_raw: Tensor::zeros(&[n_filters]),
            f_min_hz,
            band_min_hz,
            sample_rate,
            stride: 1,
            window: hamming_window(kernel_len)?,
            window_sum: 0.0,
        };
        bank.window_sum = bank.window.iter().sum();
        if n_filters >= 2 {
            bank.init_mel_scale()?;
        }
        Ok(bank)
    }

    pub fn n_filters(&self) -> usize {
        self.n_filters
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel_len
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn f_min_hz(&self) -> f64 {
        self.f_min_hz
    }

    pub fn band_min_hz(&self) -> f64 {
        self.band_min_hz
    }

    fn nyquist_n(&self) -> f64 {
        0.5
    }

    fn f_min_n(&self) -> f64 {
        self.f_min_hz / self.sample_rate as f64
    }

    fn band_min_n(&self) -> f64 {
        self.band_min_hz / self.sample_rate as f64
    }

    pub fn cutoffs(&self, i: usize) -> Cutoffs {
        let lo = self.f_min_n() + self.f1_raw.data()[i].abs();
        let lo_cap = self.nyquist_n() - self.band_min_n();
        let low_clamped = lo > lo_cap;
        let f1n = if low_clamped { lo_cap } else { lo };
        let hi = f1n + self.band_min_n() + self.band_raw.data()[i].abs();
        let high_clamped = hi > self.nyquist_n();
        let f2n = if high_clamped { self.nyquist_n() } else { hi };
        Cutoffs {
            f1n,
            f2n,
            low_clamped,
            high_clamped,
        }
    }

    /// (f1, f2) in Hz for every filter.
    pub fn cutoffs_hz(&self) -> Vec<(f64, f64)> {
        let sr = self.sample_rate as f64;
        (0..self.n_filters)
            .map(|i| {
                let c = self.cutoffs(i);
                (c.f1n * sr, c.f2n * sr)
            })
            .collect()
    }

    /// Sets raw parameters so filter `i` realizes `bands[i] = (f1, f2)` Hz.
    /// Bands narrower than `band_min` are widened to it.
    pub fn set_cutoffs_hz(&mut self, bands: &[(f64, f64)]) -> Result<()> {
        if bands.len() != self.n_filters {
            return shape_err(format!(
                "{} bands for a bank of {} filters",
                bands.len(),
                self.n_filters
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for (i, &(f1, f2)) in bands.iter().enumerate() {
            if !(f1 >= self.f_min_hz && f1 < f2 && f2 <= nyquist) {
                return param_err(format!(
                    "band {i} ({f1}, {f2}) Hz outside [{}, {nyquist}]",
                    self.f_min_hz
                ));
            }
            let sr = self.sample_rate as f64;
            self.f1_raw.data_mut()[i] = (f1 - self.f_min_hz) / sr;
            self.band_raw.data_mut()[i] = (f2 - f1 - self.band_min_hz).max(0.0) / sr;
        }
        Ok(())
    }

    /// Adjacent bands whose edges are equally spaced on the mel scale from
    /// `f_min` to Nyquist.
    pub fn init_mel_scale(&mut self) -> Result<()> {
        if self.n_filters < 2 {
            return param_err("mel initialization needs at least 2 filters");
        }
        let edges = mel_band_edges(self.f_min_hz, self.sample_rate as f64 / 2.0, self.n_filters)?;
        let bands: Vec<(f64, f64)> = edges.windows(2).map(|w| (w[0], w[1])).collect();
        self.set_cutoffs_hz(&bands)
    }

    /// Taps of one filter: windowed, DC removed, peak normalized. Also
    /// returns the unnormalized taps and the index of their peak.
    fn filter(&self, c: &Cutoffs) -> (Vec<f64>, Vec<f64>, usize) {
        let mut taps = raw_taps(c.f1n, c.f2n, self.kernel_len);
        for (g, w) in taps.iter_mut().zip(&self.window) {
            *g *= w;
        }
        let dc = taps.iter().sum::<f64>() / self.window_sum;
        for (g, w) in taps.iter_mut().zip(&self.window) {
            *g -= dc * w;
        }
        let mut peak = 0;
        for (j, g) in taps.iter().enumerate() {
            if g.abs() > taps[peak].abs() {
                peak = j;
            }
        }
        let scale = taps[peak].abs();
        let normalized = if scale > 0.0 {
            taps.iter().map(|g| g / scale).collect()
        } else {
            taps.clone()
        };
        (normalized, taps, peak)
    }

    /// Filter kernels, `[n_filters × 1 × kernel_len]`.
    pub fn build_filters(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.n_filters * self.kernel_len);
        for i in 0..self.n_filters {
            data.extend(self.filter(&self.cutoffs(i)).0);
        }
        Tensor::new(vec![self.n_filters, 1, self.kernel_len], data).expect("consistent kernel shape")
    }

    fn conv_params(&self) -> Conv1dParams {
        Conv1dParams {
            weight: self.build_filters(),
            bias: Tensor::zeros(&[self.n_filters]),
            stride: self.stride,
        }
    }

    /// Chains a gradient w.r.t. the built kernels back to the raw
    /// parameters; returns `(d f1_raw, d band_raw)`.
    pub fn kernel_backward(&self, grad_kernel: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let k = self.kernel_len;
        if grad_kernel.shape() != [self.n_filters, 1, k] {
            return shape_err(format!(
                "kernel gradient {:?} vs [{}, 1, {k}]",
                grad_kernel.shape(),
                self.n_filters
            ));
        }
        let half = (k / 2) as isize;
        let mut g_f1 = vec![0.0; self.n_filters];
        let mut g_band = vec![0.0; self.n_filters];
        for i in 0..self.n_filters {
            let c = self.cutoffs(i);
            let (_, taps, peak) = self.filter(&c);
            let gk = &grad_kernel.data()[i * k..(i + 1) * k];
            let scale = taps[peak].abs();
            if scale == 0.0 {
                continue;
            }
            // peak normalization: h = d / |d[peak]|
            let mut g_d: Vec<f64> = gk.iter().map(|g| g / scale).collect();
            let inner: f64 = gk.iter().zip(&taps).map(|(g, d)| g * d).sum();
            g_d[peak] -= inner * sign(taps[peak]) / (scale * scale);
            // DC removal: d = gw - (sum(gw) / sum(w)) * w
            let leak = dot_window(&g_d, &self.window) / self.window_sum;
            // then the window and the taps: d g[n]/d f = ±2 cos(2π f n)
            let (mut d_f1n, mut d_f2n) = (0.0, 0.0);
            for (j, gd) in g_d.iter().enumerate() {
                let g = (gd - leak) * self.window[j];
                let n = (j as isize - half) as f64;
                d_f2n += g * 2.0 * (2.0 * PI * c.f2n * n).cos();
                d_f1n -= g * 2.0 * (2.0 * PI * c.f1n * n).cos();
            }
            if !c.high_clamped {
                d_f1n += d_f2n;
                g_band[i] = sign(self.band_raw.data()[i]) * d_f2n;
            }
            if !c.low_clamped {
                g_f1[i] = sign(self.f1_raw.data()[i]) * d_f1n;
            }
        }
        Ok((g_f1, g_band))
    }

    /// Magnitude response of every filter at the given frequencies (Hz).
    pub fn frequency_response(&self, freqs_hz: &[f64]) -> Vec<Vec<f64>> {
        let kernels = self.build_filters();
        let k = self.kernel_len;
        let half = k / 2;
        let sr = self.sample_rate as f64;
        (0..self.n_filters)
            .map(|i| {
                let h = &kernels.data()[i * k..(i + 1) * k];
                freqs_hz
                    .iter()
                    .map(|&f| {
                        let omega = 2.0 * PI * f / sr;
                        // even symmetric taps: zero-phase response is real
                        let mut r = h[half];
                        for n in 1..=half {
                            r += 2.0 * h[half + n] * (omega * n as f64).cos();
                        }
                        r.abs()
                    })
                    .collect()
            })
            .collect()
    }

    /// CSV `filter_index,freq_hz,magnitude` on a 1 Hz grid from 0 to Nyquist.
    pub fn dump_response(&self) -> String {
        let grid: Vec<f64> = (0..=self.sample_rate / 2).map(f64::from).collect();
        let resp = self.frequency_response(&grid);
        let mut out = String::from("filter_index,freq_hz,magnitude\n");
        for (i, row) in resp.iter().enumerate() {
            for (f, m) in grid.iter().zip(row) {
                let _ = writeln!(out, "{i},{f},{m}");
            }
        }
        out
    }
}

fn dot_window(a: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(w).map(|(x, y)| x * y).sum()
}

/// `n + 1` edges equally spaced in mel between `lo_hz` and `hi_hz`.
pub fn mel_band_edges(lo_hz: f64, hi_hz: f64, n: usize) -> Result<Vec<f64>> {
    let lo = hz_to_mel(lo_hz)?;
    let hi = hz_to_mel(hi_hz)?;
    let mut edges = (0..=n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n as f64))
        .collect::<Result<Vec<_>>>()?;
    edges[0] = lo_hz;
    edges[n] = hi_hz;
    Ok(edges)
}

/// Valid convolution of `[batch × 1 × length]` with the bank's kernels.
pub fn sinc_forward(x: &Tensor, bank: &SincFilterBank) -> Result<Tensor> {
    check_input(x, bank)?;
    conv1d_forward(x, &bank.conv_params())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SincGrads {
    pub x: Tensor,
    pub f1_raw: Tensor,
    pub band_raw: Tensor,
}

pub fn sinc_backward(x: &Tensor, bank: &SincFilterBank, grad_out: &Tensor) -> Result<SincGrads> {
    let (gx, gf1, gband) = sinc_backward_parts(x, bank, grad_out, true)?;
    Ok(SincGrads {
        x: gx.expect("input gradient requested"),
        f1_raw: gf1,
        band_raw: gband,
    })
}

pub(crate) fn sinc_backward_parts(
    x: &Tensor,
    bank: &SincFilterBank,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    check_input(x, bank)?;
    let (gx, gk, _) = conv1d_backward_parts(x, &bank.conv_params(), grad_out, need_input)?;
    let (g1, gb) = bank.kernel_backward(&gk)?;
    Ok((
        gx,
        Tensor::new(vec![bank.n_filters], g1)?,
        Tensor::new(vec![bank.n_filters], gb)?,
    ))
}

fn check_input(x: &Tensor, bank: &SincFilterBank) -> Result<()> {
    match x.shape() {
        [_, 1, len] if *len >= bank.kernel_len => Ok(()),
        [_, 1, len] => shape_err(format!(
            "input length {len} shorter than sinc kernel {}",
            bank.kernel_len
        )),
        s => shape_err(format!("sinc layer expects [batch × 1 × length], got {s:?}")),
    }
}
