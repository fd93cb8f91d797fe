//! Spectral front end: Hamming window, magnitude STFT, mel filterbank,
//! orthonormal DCT-II and the MFCC pipeline built from them.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::Waveform;
use crate::error::{param_err, Result, TfnError};

/// Floor added to mel energies before the log.
pub const LOG_FLOOR: f64 = 1e-10;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfccConfig {
    pub frame_len_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub fmin_hz: f64,
    /// `None` means Nyquist.
    pub fmax_hz: Option<f64>,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            frame_len_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: 40,
            n_coeffs: 20,
            fmin_hz: 0.0,
            fmax_hz: None,
        }
    }
}

impl MfccConfig {
    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (self.frame_len_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn fmax(&self, sample_rate: u32) -> f64 {
        self.fmax_hz.unwrap_or(sample_rate as f64 / 2.0)
    }

    /// Frames produced for `n_samples` input samples (0 if shorter than one frame).
    pub fn n_frames(&self, n_samples: usize, sample_rate: u32) -> usize {
        let frame = self.frame_len(sample_rate);
        if n_samples < frame {
            0
        } else {
            (n_samples - frame) / self.hop(sample_rate) + 1
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let cfg = |m: String| Err(TfnError::Config(m));
        let frame = self.frame_len(sample_rate);
        let hop = self.hop(sample_rate);
        if frame == 0 || hop == 0 {
            return cfg(format!(
                "frame ({} ms) and hop ({} ms) must each cover at least one sample",
                self.frame_len_ms, self.hop_ms
            ));
        }
        if self.hop_ms > self.frame_len_ms {
            return cfg(format!(
                "hop {} ms exceeds frame length {} ms",
                self.hop_ms, self.frame_len_ms
            ));
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < frame {
            return cfg(format!(
                "n_fft {} must be a power of two >= frame length {frame}",
                self.n_fft
            ));
        }
        if self.n_mels == 0 || self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return cfg(format!(
                "need 1 <= n_coeffs ({}) <= n_mels ({})",
                self.n_coeffs, self.n_mels
            ));
        }
        let fmax = self.fmax(sample_rate);
        if !(self.fmin_hz >= 0.0 && self.fmin_hz < fmax && fmax <= sample_rate as f64 / 2.0) {
            return cfg(format!(
                "need 0 <= fmin ({}) < fmax ({fmax}) <= Nyquist",
                self.fmin_hz
            ));
        }
        Ok(())
    }
}

/// Symmetric Hamming window; `length == 1` gives `[1.0]`.
pub fn hamming_window(length: usize) -> Result<Vec<f64>> {
    match length {
        0 => param_err("window length must be at least 1"),
        1 => Ok(vec![1.0]),
        _ => {
            let denom = (length - 1) as f64;
            let mut w: Vec<f64> = (0..length)
                .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / denom).cos())
                .collect();
            // mirror so that w[k] == w[length - 1 - k] bit for bit
            for k in 0..length / 2 {
                w[length - 1 - k] = w[k];
            }
            Ok(w)
        }
    }
}

pub fn hz_to_mel(f: f64) -> Result<f64> {
    if !(f >= 0.0) {
        return param_err(format!("frequency {f} Hz must be >= 0"));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

pub fn mel_to_hz(m: f64) -> Result<f64> {
    if !(m >= 0.0) {
        return param_err(format!("mel value {m} must be >= 0"));
    }
    Ok(700.0 * (10f64.powf(m / 2595.0) - 1.0))
}

/// Triangular mel filters over the `n_fft/2 + 1` STFT bins.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `[n_mels × (n_fft/2 + 1)]`.
    pub weights: Matrix,
    /// `n_mels + 2` band edges in Hz; filter `i` spans `edges[i]..edges[i+2]`
    /// and peaks at `edges[i+1]`.
    pub edges_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn center_hz(&self, i: usize) -> f64 {
        self.edges_hz[i + 1]
    }
}

pub fn mel_filterbank(cfg: &MfccConfig, sample_rate: u32) -> Result<MelFilterbank> {
    cfg.validate(sample_rate)?;
    let n_bins = cfg.n_fft / 2 + 1;
    let lo = hz_to_mel(cfg.fmin_hz)?;
    let hi = hz_to_mel(cfg.fmax(sample_rate))?;
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    let edges_hz = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect::<Result<Vec<_>>>()?;
    let bin_hz = sample_rate as f64 / cfg.n_fft as f64;
    let mut weights = Matrix::zeros(cfg.n_mels, n_bins);
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
        let row = weights.row_mut(m);
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > left && f < center {
                (f - left) / (center - left)
            } else if f == center {
                1.0
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
        }
        if row.iter().all(|&w| w <= 0.0) {
            return Err(TfnError::Config(format!(
                "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; \
                 reduce n_mels ({}) or raise n_fft ({})",
                cfg.n_mels, cfg.n_fft
            )));
        }
    }
    Ok(MelFilterbank { weights, edges_hz })
}

/// Orthonormal DCT-II basis, `[n_out × n_in]`.
pub fn dct_matrix(n_in: usize, n_out: usize) -> Result<Matrix> {
    if n_in == 0 {
        return param_err("DCT input is empty");
    }
    if n_out > n_in {
        return param_err(format!("cannot take {n_out} DCT coefficients of {n_in} inputs"));
    }
    let mut m = Matrix::zeros(n_out, n_in);
    let n = n_in as f64;
    for k in 0..n_out {
        let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
        for (j, v) in m.row_mut(k).iter_mut().enumerate() {
            *v = scale * (PI * k as f64 * (j as f64 + 0.5) / n).cos();
        }
    }
    Ok(m)
}

pub fn dct_ii(x: &[f64], n_out: usize) -> Result<Vec<f64>> {
    let m = dct_matrix(x.len(), n_out)?;
    Ok((0..n_out).map(|k| dot(m.row(k), x)).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Precomputed window, FFT plan, filterbank and DCT basis for one
/// (config, sample rate) pair.
#[derive(Clone)]
pub struct MfccExtractor {
    cfg: MfccConfig,
    sample_rate: u32,
    frame_len: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: MelFilterbank,
    dct: Matrix,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor")
            .field("cfg", &self.cfg)
            .field("sample_rate", &self.sample_rate)
            .finish_non_exhaustive()
    }
}

impl MfccExtractor {
    pub fn new(cfg: &MfccConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let frame_len = cfg.frame_len(sample_rate);
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            frame_len,
            hop: cfg.hop(sample_rate),
            window: hamming_window(frame_len)?,
            fft: FftPlanner::new().plan_fft_forward(cfg.n_fft),
            filterbank: mel_filterbank(cfg, sample_rate)?,
            dct: dct_matrix(cfg.n_mels, cfg.n_coeffs)?,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        self.cfg.n_frames(n_samples, self.sample_rate)
    }

    pub fn stft_magnitude(&self, x: &[f64]) -> Result<Matrix> {
        if x.len() < self.frame_len {
            return Err(TfnError::InputTooShort {
                needed: self.frame_len,
                got: x.len(),
            });
        }
        let n_frames = self.n_frames(x.len());
        let n_bins = self.cfg.n_fft / 2 + 1;
        let mut out = Matrix::zeros(n_frames, n_bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        for f in 0..n_frames {
            let start = f * self.hop;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < self.frame_len {
                    Complex::new(x[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (o, c) in out.row_mut(f).iter_mut().zip(&buf) {
                *o = c.norm();
            }
        }
        Ok(out)
    }

    /// `log(filterbank · |X|² + LOG_FLOOR)`, `[n_frames × n_mels]`.
    pub fn log_mel(&self, x: &[f64]) -> Result<Matrix> {
        let mag = self.stft_magnitude(x)?;
        let fb = &self.filterbank.weights;
        let mut out = Matrix::zeros(mag.rows, fb.rows);
        let mut power = vec![0.0; mag.cols];
        for f in 0..mag.rows {
            for (p, m) in power.iter_mut().zip(mag.row(f)) {
                *p = m * m;
            }
            for (m, o) in out.row_mut(f).iter_mut().enumerate() {
                *o = (dot(fb.row(m), &power) + LOG_FLOOR).ln();
            }
        }
        Ok(out)
    }

    pub fn mfcc(&self, x: &[f64]) -> Result<MfccFrames> {
        let log_mel = self.log_mel(x)?;
        let mut coeffs = Matrix::zeros(log_mel.rows, self.cfg.n_coeffs);
        for f in 0..log_mel.rows {
            let src = log_mel.row(f);
            for (k, c) in coeffs.row_mut(f).iter_mut().enumerate() {
                *c = dot(self.dct.row(k), src);
            }
        }
        Ok(MfccFrames {
            coeffs,
            config: self.cfg.clone(),
        })
    }
}

/// Cepstral coefficients, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccFrames {
    pub coeffs: Matrix,
    pub config: MfccConfig,
}

impl MfccFrames {
    pub fn n_frames(&self) -> usize {
        self.coeffs.rows
    }
}

pub fn stft_magnitude(w: &Waveform, cfg: &MfccConfig) -> Result<Matrix> {
    MfccExtractor::new(cfg, w.sample_rate())?.stft_magnitude(w.samples())
}

pub fn mfcc(w: &Waveform, cfg: &MfccConfig) -> Result<MfccFrames> {
    MfccExtractor::new(cfg, w.sample_rate())?.mfcc(w.samples())
}
