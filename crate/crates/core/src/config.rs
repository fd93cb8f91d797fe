//! Flat `key = value` run configuration.
//!
//! One key per line, `#` starts a comment. Unknown keys are rejected,
//! missing keys keep their defaults, and [`RunConfig::to_text`] writes every
//! key so that a resolved file reproduces a run exactly (floats are printed
//! in shortest round-trip form).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::audio::DatasetOptions;
use crate::error::{Result, TfnError};
use crate::fusion::FusionType;
use crate::model::{ConvSpec, ModelConfig};

/// Training-loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds model initialization and chunk shuffling.
    pub seed: u64,
    /// Checkpoints retained in the output directory.
    pub keep_last: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            keep_last: 2,
        }
    }
}

/// Synthetic corpus settings; speaker count and sample rate come from the
/// model section.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            utts_per_speaker: 10,
            duration_s: 0.3,
            train_fraction: 0.7,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub manifest: Option<PathBuf>,
    pub outdir: Option<PathBuf>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| TfnError::Config(format!("invalid value {value:?} for key `{key}`")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str, none: &str) -> Result<Option<T>> {
    if value == none {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_blocks(key: &str, value: &str) -> Result<Vec<ConvSpec>> {
    let bad = || {
        TfnError::Config(format!(
            "invalid value {value:?} for key `{key}` (expected out_ch:kernel:stride,...)"
        ))
    };
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|item| {
            let parts: Vec<usize> = item
                .trim()
                .split(':')
                .map(|p| p.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            match parts[..] {
                [out_ch, kernel, stride] => Ok(ConvSpec::new(out_ch, kernel, stride)),
                _ => Err(bad()),
            }
        })
        .collect()
}

fn format_blocks(b: &[ConvSpec]) -> String {
    b.iter()
        .map(|s| format!("{}:{}:{}", s.out_ch, s.kernel, s.stride))
        .collect::<Vec<_>>()
        .join(",")
}

fn opt_to_string<T: ToString>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                TfnError::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TfnError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "branches" => m.branches = value.parse()?,
            "fusion" => m.fusion = value.parse::<FusionType>()?,
            "fusion_hidden" => m.fusion_hidden = parse_opt(key, value, "auto")?,
            "n_speakers" => m.n_speakers = parse(key, value)?,
            "sample_rate" => m.sample_rate = parse(key, value)?,
            "n_sinc_filters" => m.n_sinc_filters = parse(key, value)?,
            "sinc_kernel_len" => m.sinc_kernel_len = parse(key, value)?,
            "sinc_stride" => m.sinc_stride = parse(key, value)?,
            "sinc_f_min_hz" => m.sinc_f_min_hz = parse(key, value)?,
            "sinc_band_min_hz" => m.sinc_band_min_hz = parse(key, value)?,
            "time_conv_blocks" => m.time_conv_blocks = parse_blocks(key, value)?,
            "freq_conv_blocks" => m.freq_conv_blocks = parse_blocks(key, value)?,
            "class_space_dim" => m.class_space_dim = parse(key, value)?,
            "chunk_ms" => m.chunk_ms = parse(key, value)?,
            "chunk_shift_ms" => m.chunk_shift_ms = parse(key, value)?,
            "mfcc_frame_len_ms" => m.mfcc.frame_len_ms = parse(key, value)?,
            "mfcc_hop_ms" => m.mfcc.hop_ms = parse(key, value)?,
            "mfcc_n_fft" => m.mfcc.n_fft = parse(key, value)?,
            "mfcc_n_mels" => m.mfcc.n_mels = parse(key, value)?,
            "mfcc_n_coeffs" => m.mfcc.n_coeffs = parse(key, value)?,
            "mfcc_fmin_hz" => m.mfcc.fmin_hz = parse(key, value)?,
            "mfcc_fmax_hz" => m.mfcc.fmax_hz = parse_opt(key, value, "nyquist")?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "adam_beta1" => t.beta1 = parse(key, value)?,
            "adam_beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.eps = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "keep_last" => t.keep_last = parse(key, value)?,
            "utts_per_speaker" => d.utts_per_speaker = parse(key, value)?,
            "duration_s" => d.duration_s = parse(key, value)?,
            "train_fraction" => d.train_fraction = parse(key, value)?,
            "data_seed" => d.seed = parse(key, value)?,
            "manifest" => self.manifest = parse_opt(key, value, "none")?,
            "outdir" => self.outdir = parse_opt(key, value, "none")?,
            other => return Err(TfnError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".into(), |p| p.display().to_string());
        vec![
            ("branches", m.branches.to_string()),
            ("fusion", m.fusion.to_string()),
            ("fusion_hidden", opt_to_string(&m.fusion_hidden, "auto")),
            ("n_speakers", m.n_speakers.to_string()),
            ("sample_rate", m.sample_rate.to_string()),
            ("n_sinc_filters", m.n_sinc_filters.to_string()),
            ("sinc_kernel_len", m.sinc_kernel_len.to_string()),
            ("sinc_stride", m.sinc_stride.to_string()),
            ("sinc_f_min_hz", m.sinc_f_min_hz.to_string()),
            ("sinc_band_min_hz", m.sinc_band_min_hz.to_string()),
            ("time_conv_blocks", format_blocks(&m.time_conv_blocks)),
            ("freq_conv_blocks", format_blocks(&m.freq_conv_blocks)),
            ("class_space_dim", m.class_space_dim.to_string()),
            ("chunk_ms", m.chunk_ms.to_string()),
            ("chunk_shift_ms", m.chunk_shift_ms.to_string()),
            ("mfcc_frame_len_ms", m.mfcc.frame_len_ms.to_string()),
            ("mfcc_hop_ms", m.mfcc.hop_ms.to_string()),
            ("mfcc_n_fft", m.mfcc.n_fft.to_string()),
            ("mfcc_n_mels", m.mfcc.n_mels.to_string()),
            ("mfcc_n_coeffs", m.mfcc.n_coeffs.to_string()),
            ("mfcc_fmin_hz", m.mfcc.fmin_hz.to_string()),
            ("mfcc_fmax_hz", opt_to_string(&m.mfcc.fmax_hz, "nyquist")),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("adam_beta1", t.beta1.to_string()),
            ("adam_beta2", t.beta2.to_string()),
            ("adam_eps", t.eps.to_string()),
            ("seed", t.seed.to_string()),
            ("keep_last", t.keep_last.to_string()),
            ("utts_per_speaker", d.utts_per_speaker.to_string()),
            ("duration_s", d.duration_s.to_string()),
            ("train_fraction", d.train_fraction.to_string()),
            ("data_seed", d.seed.to_string()),
            ("manifest", path(&self.manifest)),
            ("outdir", path(&self.outdir)),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Checks model and training settings together.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(TfnError::Config(format!(
                "batch_size must be >= 2 (batch statistics), got {}",
                t.batch_size
            )));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(TfnError::Config(format!("lr must be finite and >= 0, got {}", t.lr)));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return Err(TfnError::Config(
                "adam_beta1/adam_beta2 must lie in [0, 1) and adam_eps must be positive".into(),
            ));
        }
        if t.keep_last == 0 {
            return Err(TfnError::Config("keep_last must be >= 1".into()));
        }
        Ok(())
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            n_speakers: self.model.n_speakers,
            utts_per_speaker: self.data.utts_per_speaker,
            duration_s: self.data.duration_s,
            sample_rate: self.model.sample_rate,
            train_fraction: self.data.train_fraction,
            seed: self.data.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Branches;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = RunConfig::parse(
            "# run\nbranches = freq_only\nlr=0.0005  # smaller\n\nfusion_hidden = 48\ntime_conv_blocks = 8:3:1, 8:3:2\n",
        )
        .unwrap();
        assert_eq!(cfg.model.branches, Branches::FreqOnly);
        assert_eq!(cfg.train.lr, 0.0005);
        assert_eq!(cfg.model.fusion_hidden, Some(48));
        assert_eq!(cfg.model.time_conv_blocks, vec![ConvSpec::new(8, 3, 1), ConvSpec::new(8, 3, 2)]);
        assert_eq!(cfg.train.epochs, 24);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn awkward_floats_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 0.1 + 0.2;
        cfg.model.chunk_ms = 1.0 / 3.0;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("learning_rate = 0.1").unwrap_err();
        assert!(matches!(err, TfnError::Config(_)));
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn bad_value_is_named() {
        let err = RunConfig::parse("epochs = many").unwrap_err();
        assert!(err.to_string().contains("epochs"));
        assert!(RunConfig::parse("time_conv_blocks = 8:3").is_err());
        assert!(RunConfig::parse("just a line").is_err());
    }

    #[test]
    fn validate_rejects_bad_training_settings() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.train.batch_size = 1;
        assert!(cfg.validate().is_err());
    }
}
