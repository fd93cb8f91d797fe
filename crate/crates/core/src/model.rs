//! TFN assembly: time branch, frequency branch, fusion and classifier head.
//!
//! ```text
//! time:  chunk -> sinc bank -> |·| -> maxpool(3,3) -> conv blocks -> mean over time
//! freq:  chunk -> MFCC [coeffs × frames] -> conv blocks -> mean over time
//! both:  fusion(time, freq) -> head
//! one:   dense(class_space_dim) -> head
//! ```

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::dsp::{MfccConfig, MfccExtractor};
use crate::error::{shape_err, Result, TfnError};
use crate::fusion::{
    validate_dims, DenseBlock, DenseCache, FusionCache, FusionParams, FusionType, BN_BUFFER_NAMES,
    DENSE_PARAM_NAMES,
};
use crate::layers::{
    abs_backward, abs_forward, batchnorm_backward, batchnorm_normalize, conv1d_backward_parts,
    conv1d_forward, conv_out_len, he_uniform, linear_backward, linear_forward, maxpool1d_backward,
    maxpool1d_forward, mean_pool_backward, mean_pool_forward, relu_backward, relu_forward,
    softmax_xent, BatchNormParams, BnStats, Conv1dParams, LinearParams, Mode, Tensor,
};
use crate::sincfilter::{sinc_backward_parts, sinc_forward, SincFilterBank};

/// Width and stride of the max pooling right after the sinc layer.
pub const SINC_POOL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branches {
    TimeOnly,
    FreqOnly,
    Both,
}

impl Branches {
    pub const ALL: [Branches; 3] = [Branches::TimeOnly, Branches::FreqOnly, Branches::Both];

    pub fn has_time(self) -> bool {
        self != Branches::FreqOnly
    }

    pub fn has_freq(self) -> bool {
        self != Branches::TimeOnly
    }
}

impl fmt::Display for Branches {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branches::TimeOnly => "time_only",
            Branches::FreqOnly => "freq_only",
            Branches::Both => "both",
        })
    }
}

impl FromStr for Branches {
    type Err = TfnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time_only" | "time" => Ok(Branches::TimeOnly),
            "freq_only" | "freq" => Ok(Branches::FreqOnly),
            "both" => Ok(Branches::Both),
            other => Err(TfnError::Config(format!(
                "unknown branches value {other:?} (expected time_only|freq_only|both)"
            ))),
        }
    }
}

/// (out_ch, kernel, stride) of one conv block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub const fn new(out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            out_ch,
            kernel,
            stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub branches: Branches,
    pub sample_rate: u32,
    pub n_sinc_filters: usize,
    pub sinc_kernel_len: usize,
    pub sinc_stride: usize,
    pub sinc_f_min_hz: f64,
    pub sinc_band_min_hz: f64,
    pub time_conv_blocks: Vec<ConvSpec>,
    pub freq_conv_blocks: Vec<ConvSpec>,
    pub class_space_dim: usize,
    pub fusion: FusionType,
    /// First fusion transformation width; `None` means `d_t + d_f`.
    pub fusion_hidden: Option<usize>,
    pub n_speakers: usize,
    pub mfcc: MfccConfig,
    pub chunk_ms: f64,
    pub chunk_shift_ms: f64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            branches: Branches::Both,
            sample_rate: DEFAULT_SAMPLE_RATE,
            n_sinc_filters: 32,
            sinc_kernel_len: 101,
            sinc_stride: 1,
            sinc_f_min_hz: crate::sincfilter::DEFAULT_F_MIN_HZ,
            sinc_band_min_hz: crate::sincfilter::DEFAULT_BAND_MIN_HZ,
            time_conv_blocks: vec![ConvSpec::new(32, 5, 1), ConvSpec::new(32, 5, 1)],
            freq_conv_blocks: vec![ConvSpec::new(32, 3, 1), ConvSpec::new(32, 3, 1)],
            class_space_dim: 64,
            fusion: FusionType::Early,
            fusion_hidden: None,
            n_speakers: 10,
            mfcc: MfccConfig::default(),
            chunk_ms: 200.0,
            chunk_shift_ms: 10.0,
        }
    }
}

impl ModelConfig {
    /// Samples per chunk.
    pub fn chunk_len(&self) -> usize {
        (self.chunk_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn chunk_shift(&self) -> usize {
        (self.chunk_shift_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    /// Time positions left before global pooling in the time branch.
    pub fn time_positions(&self) -> Result<usize> {
        let mut len = conv_out_len(self.chunk_len(), self.sinc_kernel_len, self.sinc_stride)?;
        len = conv_out_len(len, SINC_POOL, SINC_POOL)?;
        for b in &self.time_conv_blocks {
            len = conv_out_len(len, b.kernel, b.stride)?;
        }
        Ok(len)
    }

    /// Time positions left before global pooling in the frequency branch.
    pub fn freq_positions(&self) -> Result<usize> {
        let mut len = self.mfcc.n_frames(self.chunk_len(), self.sample_rate);
        if len == 0 {
            return shape_err("chunk shorter than one MFCC frame");
        }
        for b in &self.freq_conv_blocks {
            len = conv_out_len(len, b.kernel, b.stride)?;
        }
        Ok(len)
    }

    pub fn time_dim(&self) -> usize {
        self.time_conv_blocks.last().map_or(0, |b| b.out_ch)
    }

    pub fn freq_dim(&self) -> usize {
        self.freq_conv_blocks.last().map_or(0, |b| b.out_ch)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(TfnError::Config(m));
        if self.n_speakers < 2 {
            return cfg(format!("n_speakers must be >= 2, got {}", self.n_speakers));
        }
        if self.class_space_dim == 0 {
            return cfg("class_space_dim must be positive".into());
        }
        if self.sample_rate == 0 {
            return cfg("sample_rate must be positive".into());
        }
        if !(self.chunk_ms > 0.0 && self.chunk_shift_ms > 0.0) || self.chunk_shift() == 0 {
            return cfg(format!(
                "chunk_ms ({}) and chunk_shift_ms ({}) must be positive",
                self.chunk_ms, self.chunk_shift_ms
            ));
        }
        let zero_spec = |v: &[ConvSpec]| v.iter().any(|b| b.out_ch == 0 || b.kernel == 0 || b.stride == 0);
        if self.branches.has_time() {
            if self.time_conv_blocks.is_empty() || zero_spec(&self.time_conv_blocks) {
                return cfg("time_conv_blocks must be a non-empty list of positive (out_ch:kernel:stride)".into());
            }
            if self.n_sinc_filters == 0 || self.sinc_kernel_len.is_multiple_of(2) || self.sinc_stride == 0 {
                return cfg(format!(
                    "sinc layer needs n_sinc_filters >= 1, odd sinc_kernel_len (got {}) and sinc_stride >= 1",
                    self.sinc_kernel_len
                ));
            }
            self.time_positions().map_err(|e| {
                TfnError::Config(format!("chunk of {} ms too short for the time branch: {e}", self.chunk_ms))
            })?;
        }
        if self.branches.has_freq() {
            if self.freq_conv_blocks.is_empty() || zero_spec(&self.freq_conv_blocks) {
                return cfg("freq_conv_blocks must be a non-empty list of positive (out_ch:kernel:stride)".into());
            }
            self.mfcc.validate(self.sample_rate)?;
            self.freq_positions().map_err(|e| {
                TfnError::Config(format!("chunk of {} ms too short for the frequency branch: {e}", self.chunk_ms))
            })?;
        }
        if self.branches == Branches::Both {
            let hidden = self.fusion_hidden.unwrap_or(self.time_dim() + self.freq_dim());
            validate_dims(
                self.fusion,
                self.time_dim(),
                self.freq_dim(),
                self.class_space_dim,
                hidden,
            )?;
        }
        Ok(())
    }
}

/// Conv + batch norm + ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv1dParams,
    pub bn: BatchNormParams,
}

#[derive(Debug, Clone)]
struct ConvCache {
    x: Tensor,
    z: Tensor,
    y: Tensor,
    stats: BnStats,
}

impl ConvBlock {
    fn new(rng: &mut ChaCha8Rng, in_ch: usize, spec: ConvSpec) -> Self {
        Self {
            conv: Conv1dParams {
                weight: he_uniform(rng, &[spec.out_ch, in_ch, spec.kernel], in_ch * spec.kernel),
                bias: Tensor::zeros(&[spec.out_ch]),
                stride: spec.stride,
            },
            bn: BatchNormParams::new(spec.out_ch),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, ConvCache)> {
        let z = conv1d_forward(x, &self.conv)?;
        let (y, stats) = batchnorm_normalize(&z, &self.bn)?;
        let out = relu_forward(&y);
        Ok((
            out,
            ConvCache {
                x: x.clone(),
                z,
                y,
                stats,
            },
        ))
    }

    fn backward(&self, c: &ConvCache, g: &Tensor, need_input: bool) -> Result<(Option<Tensor>, Vec<Tensor>)> {
        let gy = relu_backward(&c.y, g)?;
        let bn = batchnorm_backward(&c.z, &self.bn, &gy)?;
        let (gx, gw, gb) = conv1d_backward_parts(&c.x, &self.conv, &bn.x, need_input)?;
        Ok((gx, vec![gw, gb, bn.gamma, bn.beta]))
    }

    fn params(&self) -> [&Tensor; 4] {
        [&self.conv.weight, &self.conv.bias, &self.bn.gamma, &self.bn.beta]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 4] {
        [
            &mut self.conv.weight,
            &mut self.conv.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
        ]
    }
}

/// The full network. Single-branch variants carry `single` instead of
/// `fusion`.
#[derive(Debug, Clone)]
pub struct TfnModel {
    pub config: ModelConfig,
    pub sinc: Option<SincFilterBank>,
    pub time_blocks: Vec<ConvBlock>,
    pub freq_blocks: Vec<ConvBlock>,
    pub fusion: Option<FusionParams>,
    pub single: Option<DenseBlock>,
    pub head: LinearParams,
    mfcc: Option<MfccExtractor>,
}

/// Intermediates of one forward pass, consumed by backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    time: Option<TimeCache>,
    freq: Option<FreqCache>,
    fusion: Option<FusionCache>,
    single: Option<DenseCache>,
    head_in: Tensor,
}

#[derive(Debug, Clone)]
struct TimeCache {
    x: Tensor,
    sinc_out: Tensor,
    pool_idx: Vec<usize>,
    pooled_shape: Vec<usize>,
    blocks: Vec<ConvCache>,
    last_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
struct FreqCache {
    blocks: Vec<ConvCache>,
    last_shape: Vec<usize>,
}

pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<TfnModel> {
    TfnModel::new(cfg, seed)
}

impl TfnModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sinc = None;
        let mut time_blocks = Vec::new();
        if cfg.branches.has_time() {
            let mut bank = SincFilterBank::with_limits(
                cfg.n_sinc_filters,
                cfg.sinc_kernel_len,
                cfg.sample_rate,
                cfg.sinc_f_min_hz,
                cfg.sinc_band_min_hz,
            )?;
            bank.stride = cfg.sinc_stride;
            let mut in_ch = cfg.n_sinc_filters;
            for spec in &cfg.time_conv_blocks {
                time_blocks.push(ConvBlock::new(&mut rng, in_ch, *spec));
                in_ch = spec.out_ch;
            }
            sinc = Some(bank);
        }
        let mut freq_blocks = Vec::new();
        let mut mfcc = None;
        if cfg.branches.has_freq() {
            let mut in_ch = cfg.mfcc.n_coeffs;
            for spec in &cfg.freq_conv_blocks {
                freq_blocks.push(ConvBlock::new(&mut rng, in_ch, *spec));
                in_ch = spec.out_ch;
            }
            mfcc = Some(MfccExtractor::new(&cfg.mfcc, cfg.sample_rate)?);
        }
        let (fusion, single) = match cfg.branches {
            Branches::Both => (
                Some(FusionParams::new(
                    &mut rng,
                    cfg.fusion,
                    cfg.time_dim(),
                    cfg.freq_dim(),
                    cfg.class_space_dim,
                    cfg.fusion_hidden,
                )?),
                None,
            ),
            Branches::TimeOnly => (None, Some(DenseBlock::new(&mut rng, cfg.time_dim(), cfg.class_space_dim))),
            Branches::FreqOnly => (None, Some(DenseBlock::new(&mut rng, cfg.freq_dim(), cfg.class_space_dim))),
        };
        let head = LinearParams {
            weight: he_uniform(&mut rng, &[cfg.n_speakers, cfg.class_space_dim], cfg.class_space_dim),
            bias: Tensor::zeros(&[cfg.n_speakers]),
        };
        Ok(Self {
            config: cfg.clone(),
            sinc,
            time_blocks,
            freq_blocks,
            fusion,
            single,
            head,
            mfcc,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        for b in self.time_blocks.iter_mut().chain(self.freq_blocks.iter_mut()) {
            b.bn.mode = mode;
        }
        if let Some(f) = &mut self.fusion {
            f.set_mode(mode);
        }
        if let Some(s) = &mut self.single {
            s.bn.mode = mode;
        }
    }

    /// Mode of the batch-norm layers (all share one).
    pub fn mode(&self) -> Mode {
        self.time_blocks
            .first()
            .or(self.freq_blocks.first())
            .map_or(Mode::Training, |b| b.bn.mode)
    }

    /// Trainable tensors in a fixed, declared order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let Some(s) = &self.sinc {
            out.push(("sinc.f1_raw".into(), &s.f1_raw));
            out.push(("sinc.band_raw".into(), &s.band_raw));
        }
        for (group, blocks) in [("time", &self.time_blocks), ("freq", &self.freq_blocks)] {
            for (i, b) in blocks.iter().enumerate() {
                for (name, t) in DENSE_PARAM_NAMES.iter().zip(b.params()) {
                    out.push((format!("{group}.{i}.{name}"), t));
                }
            }
        }
        if let Some(f) = &self.fusion {
            out.extend(f.named_params());
        }
        if let Some(s) = &self.single {
            for (name, t) in DENSE_PARAM_NAMES.iter().zip(s.params()) {
                out.push((format!("single.{name}"), t));
            }
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Same order as [`TfnModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if let Some(s) = &mut self.sinc {
            out.push(&mut s.f1_raw);
            out.push(&mut s.band_raw);
        }
        for b in self.time_blocks.iter_mut().chain(self.freq_blocks.iter_mut()) {
            out.extend(b.params_mut());
        }
        if let Some(f) = &mut self.fusion {
            out.extend(f.params_mut());
        }
        if let Some(s) = &mut self.single {
            out.extend(s.params_mut());
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Batch-norm running statistics.
    pub fn named_buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (group, blocks) in [("time", &self.time_blocks), ("freq", &self.freq_blocks)] {
            for (i, b) in blocks.iter().enumerate() {
                out.push((format!("{group}.{i}.{}", BN_BUFFER_NAMES[0]), &b.bn.running_mean));
                out.push((format!("{group}.{i}.{}", BN_BUFFER_NAMES[1]), &b.bn.running_var));
            }
        }
        if let Some(f) = &self.fusion {
            out.extend(f.named_buffers());
        }
        if let Some(s) = &self.single {
            for (name, t) in BN_BUFFER_NAMES.iter().zip(s.buffers()) {
                out.push((format!("single.{name}"), t));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in self.time_blocks.iter_mut().chain(self.freq_blocks.iter_mut()) {
            out.push(&mut b.bn.running_mean);
            out.push(&mut b.bn.running_var);
        }
        if let Some(f) = &mut self.fusion {
            out.extend(f.buffers_mut());
        }
        if let Some(s) = &mut self.single {
            out.extend(s.buffers_mut());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn time_forward(&self, chunks: &[&[f64]]) -> Result<(Tensor, TimeCache)> {
        let bank = self.sinc.as_ref().expect("time branch present");
        let len = self.config.chunk_len();
        let mut data = Vec::with_capacity(chunks.len() * len);
        for c in chunks {
            data.extend_from_slice(c);
        }
        let x = Tensor::new(vec![chunks.len(), 1, len], data)?;
        let sinc_out = sinc_forward(&x, bank)?;
        let rect = abs_forward(&sinc_out);
        let (mut h, pool_idx) = maxpool1d_forward(&rect, SINC_POOL, SINC_POOL)?;
        let pooled_shape = h.shape().to_vec();
        let mut blocks = Vec::with_capacity(self.time_blocks.len());
        for b in &self.time_blocks {
            let (y, c) = b.forward(&h)?;
            blocks.push(c);
            h = y;
        }
        let last_shape = h.shape().to_vec();
        let emb = mean_pool_forward(&h)?;
        Ok((
            emb,
            TimeCache {
                x,
                sinc_out,
                pool_idx,
                pooled_shape,
                blocks,
                last_shape,
            },
        ))
    }

    /// MFCC frames of each chunk as `[batch × n_coeffs × n_frames]`.
    pub fn mfcc_input(&self, chunks: &[&[f64]]) -> Result<Tensor> {
        let ex = self.mfcc.as_ref().expect("frequency branch present");
        let n_coeffs = self.config.mfcc.n_coeffs;
        let n_frames = ex.n_frames(self.config.chunk_len());
        let mut data = vec![0.0; chunks.len() * n_coeffs * n_frames];
        for (b, c) in chunks.iter().enumerate() {
            let m = ex.mfcc(c)?;
            for f in 0..n_frames {
                for (k, v) in m.coeffs.row(f).iter().enumerate() {
                    data[(b * n_coeffs + k) * n_frames + f] = *v;
                }
            }
        }
        Tensor::new(vec![chunks.len(), n_coeffs, n_frames], data)
    }

    fn freq_forward(&self, chunks: &[&[f64]]) -> Result<(Tensor, FreqCache)> {
        let mut h = self.mfcc_input(chunks)?;
        let mut blocks = Vec::with_capacity(self.freq_blocks.len());
        for b in &self.freq_blocks {
            let (y, c) = b.forward(&h)?;
            blocks.push(c);
            h = y;
        }
        let last_shape = h.shape().to_vec();
        Ok((mean_pool_forward(&h)?, FreqCache { blocks, last_shape }))
    }

    /// Logits `[batch × n_speakers]` for equally long chunks. Does not
    /// modify the model; see [`TfnModel::commit_stats`].
    pub fn forward_batch(&self, chunks: &[&[f64]]) -> Result<(Tensor, ForwardCache)> {
        let len = self.config.chunk_len();
        if chunks.is_empty() {
            return shape_err("empty batch");
        }
        if let Some(c) = chunks.iter().find(|c| c.len() != len) {
            return shape_err(format!("chunk has {} samples, model expects {len}", c.len()));
        }
        let (t_emb, time) = if self.config.branches.has_time() {
            let (e, c) = self.time_forward(chunks)?;
            (Some(e), Some(c))
        } else {
            (None, None)
        };
        let (f_emb, freq) = if self.config.branches.has_freq() {
            let (e, c) = self.freq_forward(chunks)?;
            (Some(e), Some(c))
        } else {
            (None, None)
        };
        let mut fusion_cache = None;
        let mut single_cache = None;
        let head_in = match (&self.fusion, &self.single) {
            (Some(f), _) => {
                let (y, c) = f.forward(t_emb.as_ref().unwrap(), f_emb.as_ref().unwrap())?;
                fusion_cache = Some(c);
                y
            }
            (None, Some(s)) => {
                let emb = t_emb.or(f_emb).expect("one branch present");
                let (y, c) = s.forward(&emb)?;
                single_cache = Some(c);
                y
            }
            (None, None) => unreachable!("model has neither fusion nor single transformation"),
        };
        let logits = linear_forward(&head_in, &self.head)?;
        Ok((
            logits,
            ForwardCache {
                time,
                freq,
                fusion: fusion_cache,
                single: single_cache,
                head_in,
            },
        ))
    }

    /// Logits `[1 × n_speakers]` for one chunk. Needs inference mode, since
    /// batch statistics of a single example are degenerate.
    pub fn forward(&self, chunk: &[f64]) -> Result<Tensor> {
        Ok(self.forward_batch(&[chunk])?.0)
    }

    pub fn forward_waveform(&self, chunk: &Waveform) -> Result<Tensor> {
        if chunk.sample_rate() != self.config.sample_rate {
            return shape_err(format!(
                "chunk sampled at {} Hz, model expects {} Hz",
                chunk.sample_rate(),
                self.config.sample_rate
            ));
        }
        self.forward(chunk.samples())
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// estimates.
    pub fn commit_stats(&mut self, cache: &ForwardCache) {
        if let Some(tc) = &cache.time {
            for (b, c) in self.time_blocks.iter_mut().zip(&tc.blocks) {
                if b.bn.mode == Mode::Training {
                    b.bn.update_running(&c.stats);
                }
            }
        }
        if let Some(fc) = &cache.freq {
            for (b, c) in self.freq_blocks.iter_mut().zip(&fc.blocks) {
                if b.bn.mode == Mode::Training {
                    b.bn.update_running(&c.stats);
                }
            }
        }
        if let (Some(f), Some(c)) = (&mut self.fusion, &cache.fusion) {
            f.commit_stats(c);
        }
        if let (Some(s), Some(c)) = (&mut self.single, &cache.single) {
            s.commit_stats(c);
        }
    }

    /// Gradients of every trainable tensor, in [`TfnModel::named_params`] order.
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        let head = linear_backward(&cache.head_in, &self.head, grad_logits)?;
        let mut fusion_grads = Vec::new();
        let mut single_grads = Vec::new();
        let (g_time, g_freq) = match (&self.fusion, &self.single) {
            (Some(f), _) => {
                let g = f.backward(cache.fusion.as_ref().expect("fusion cache"), &head.x)?;
                fusion_grads = g.params;
                (Some(g.t), Some(g.f))
            }
            (None, Some(s)) => {
                let (gx, gp) = s.backward(cache.single.as_ref().expect("single cache"), &head.x)?;
                single_grads = gp;
                if self.config.branches.has_time() {
                    (Some(gx), None)
                } else {
                    (None, Some(gx))
                }
            }
            (None, None) => unreachable!("model has neither fusion nor single transformation"),
        };

        let mut sinc_grads = Vec::new();
        let mut time_grads = Vec::new();
        if let (Some(g), Some(tc)) = (g_time, &cache.time) {
            let mut g = mean_pool_backward(&tc.last_shape, &g)?;
            let mut per_block = Vec::new();
            for (b, c) in self.time_blocks.iter().zip(&tc.blocks).rev() {
                let (gx, gp) = b.backward(c, &g, true)?;
                per_block.push(gp);
                g = gx.expect("input gradient requested");
            }
            per_block.reverse();
            time_grads = per_block.into_iter().flatten().collect();
            let _ = &tc.pooled_shape;
            let g = maxpool1d_backward(tc.sinc_out.shape(), &tc.pool_idx, &g)?;
            let g = abs_backward(&tc.sinc_out, &g)?;
            let bank = self.sinc.as_ref().expect("sinc bank");
            let (_, g1, gb) = sinc_backward_parts(&tc.x, bank, &g, false)?;
            sinc_grads = vec![g1, gb];
        }
        let mut freq_grads = Vec::new();
        if let (Some(g), Some(fc)) = (g_freq, &cache.freq) {
            let mut g = mean_pool_backward(&fc.last_shape, &g)?;
            let mut per_block = Vec::new();
            let n = self.freq_blocks.len();
            for (i, (b, c)) in self.freq_blocks.iter().zip(&fc.blocks).enumerate().rev() {
                // MFCC input is not trainable
                let (gx, gp) = b.backward(c, &g, i > 0)?;
                per_block.push(gp);
                if let Some(gx) = gx {
                    g = gx;
                }
            }
            debug_assert_eq!(per_block.len(), n);
            per_block.reverse();
            freq_grads = per_block.into_iter().flatten().collect();
        }
        let mut out = sinc_grads;
        out.extend(time_grads);
        out.extend(freq_grads);
        out.extend(fusion_grads);
        out.extend(single_grads);
        out.push(head.weight);
        out.push(head.bias);
        Ok(out)
    }

    /// Mean cross-entropy of a labeled batch, its parameter gradients and
    /// the forward cache (for [`TfnModel::commit_stats`]).
    pub fn loss_and_grads(
        &self,
        chunks: &[&[f64]],
        labels: &[usize],
    ) -> Result<(f64, Vec<Tensor>, ForwardCache)> {
        let (logits, cache) = self.forward_batch(chunks)?;
        let (loss, g) = softmax_xent(&logits, labels)?;
        let grads = self.backward(&cache, &g)?;
        Ok((loss, grads, cache))
    }

    /// Adds `grads` into the parameters' gradient slots.
    pub fn accumulate_grads(&mut self, grads: &[Tensor]) -> Result<()> {
        let params = self.params_mut();
        if params.len() != grads.len() {
            return shape_err(format!("{} gradients for {} parameters", grads.len(), params.len()));
        }
        for (p, g) in params.into_iter().zip(grads) {
            if p.shape() != g.shape() {
                return shape_err(format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()));
            }
            p.accumulate_grad(g.data());
        }
        Ok(())
    }
}
