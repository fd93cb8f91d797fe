//! Waveform container, PCM16 WAV I/O, and a seeded synthetic speaker corpus.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, Result, TfnError};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Peak amplitude of every synthesized utterance.
pub const SYNTH_PEAK: f64 = 0.9;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return param_err("sample rate must be positive");
        }
        if samples.is_empty() {
            return param_err("waveform has no samples");
        }
        if let Some(i) = samples
            .iter()
            .position(|s| !s.is_finite() || s.abs() > 1.0)
        {
            return param_err(format!(
                "sample {i} = {} is outside [-1, 1]",
                samples[i]
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a RIFF/WAVE PCM16 mono byte buffer.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(TfnError::Format("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(TfnError::Format(format!(
                "chunk {:?} runs past end of file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(TfnError::Format("fmt chunk shorter than 16 bytes".into()));
                }
                fmt = Some((
                    le_u16(bytes, body),
                    le_u16(bytes, body + 2),
                    le_u32(bytes, body + 4),
                    le_u16(bytes, body + 14),
                ));
            }
            b"data" => {
                data = Some(&bytes[body..body + size]);
            }
            _ => {}
        }
        // chunks are word aligned
        pos = body + size + (size & 1);
    }
    let (format_tag, channels, sample_rate, bits) =
        fmt.ok_or_else(|| TfnError::Format("no fmt chunk".into()))?;
    let data = data.ok_or_else(|| TfnError::Format("no data chunk".into()))?;
    if format_tag != 1 {
        return Err(TfnError::UnsupportedFormat(format!(
            "format tag {format_tag}, only PCM (1) is supported"
        )));
    }
    if channels != 1 {
        return Err(TfnError::UnsupportedFormat(format!(
            "{channels} channels, only mono is supported"
        )));
    }
    if bits != 16 {
        return Err(TfnError::UnsupportedFormat(format!(
            "{bits}-bit samples, only 16-bit is supported"
        )));
    }
    if sample_rate == 0 {
        return Err(TfnError::Format("sample rate is zero".into()));
    }
    if data.len() % 2 != 0 {
        return Err(TfnError::Format("odd-length PCM16 data chunk".into()));
    }
    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
        .collect();
    if samples.is_empty() {
        return Err(TfnError::Format("data chunk is empty".into()));
    }
    Waveform::new(samples, sample_rate)
}

/// Encodes as canonical 44-byte-header PCM16 mono.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.len() * 2) as u32;
    let sr = w.sample_rate();
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sr.to_le_bytes());
    out.extend_from_slice(&(sr * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in w.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    decode_wav(&fs::read(path)?)
}

pub fn write_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_wav(w))?;
    Ok(())
}

/// Voice parameters of one synthetic speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: usize,
    pub fundamental_hz: f64,
    /// (center Hz, amplitude) per resonance.
    pub formants: Vec<(f64, f64)>,
    /// Relative pitch wobble, in `[0, 0.2]`.
    pub jitter: f64,
}

impl SpeakerProfile {
    fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.fundamental_hz > 50.0 && self.fundamental_hz < 400.0) {
            return param_err(format!(
                "fundamental {} Hz outside (50, 400)",
                self.fundamental_hz
            ));
        }
        if !(0.0..=0.2).contains(&self.jitter) {
            return param_err(format!("jitter {} outside [0, 0.2]", self.jitter));
        }
        for &(center, amp) in &self.formants {
            if !(center > 0.0 && center < nyquist) {
                return param_err(format!(
                    "formant at {center} Hz is not below Nyquist ({nyquist} Hz)"
                ));
            }
            if !(amp.is_finite() && amp >= 0.0) {
                return param_err(format!("formant amplitude {amp} must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Spectral envelope gain at `freq` Hz.
    fn envelope(&self, freq: f64) -> f64 {
        let resonant: f64 = self
            .formants
            .iter()
            .map(|&(center, amp)| {
                let bw = 60.0 + 0.08 * center;
                let d = (freq - center) / bw;
                amp / (1.0 + d * d)
            })
            .sum();
        resonant + 0.02
    }
}

/// Harmonic source at the speaker's pitch, shaped by its formants, peak
/// normalized to [`SYNTH_PEAK`]. Deterministic in all arguments.
pub fn synth_utterance(
    profile: &SpeakerProfile,
    duration_s: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Waveform> {
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return param_err(format!("duration {duration_s} s must be positive"));
    }
    if sample_rate == 0 {
        return param_err("sample rate must be positive");
    }
    profile.validate(sample_rate)?;
    let n = (duration_s * sample_rate as f64).round() as usize;
    if n == 0 {
        return param_err(format!("duration {duration_s} s is shorter than one sample"));
    }
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // pitch contour: linear interpolation between random knots every 20 ms
    let knot_step = (0.02 * sr).max(1.0);
    let n_knots = (n as f64 / knot_step).ceil() as usize + 2;
    let knots: Vec<f64> = (0..n_knots)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();

    let top = profile.fundamental_hz * (1.0 + profile.jitter);
    let n_harm = ((0.95 * nyquist) / top).floor().max(1.0) as usize;
    let harmonics: Vec<(f64, f64)> = (1..=n_harm)
        .map(|h| {
            let gain = profile.envelope(h as f64 * profile.fundamental_hz);
            let phase = rng.random_range(0.0..2.0 * PI);
            (gain, phase)
        })
        .collect();

    let mut samples = Vec::with_capacity(n);
    let mut cycles = 0.0f64;
    for i in 0..n {
        let f0 = if profile.jitter > 0.0 {
            let pos = i as f64 / knot_step;
            let k = pos.floor() as usize;
            let frac = pos - k as f64;
            let r = knots[k] * (1.0 - frac) + knots[k + 1] * frac;
            profile.fundamental_hz * (1.0 + profile.jitter * r)
        } else {
            profile.fundamental_hz
        };
        let base = if profile.jitter > 0.0 {
            cycles
        } else {
            i as f64 * profile.fundamental_hz / sr
        };
        let mut s = 0.0;
        for (h, &(gain, phase)) in harmonics.iter().enumerate() {
            s += gain * (2.0 * PI * (h + 1) as f64 * base + phase).sin();
        }
        samples.push(s);
        cycles += f0 / sr;
    }

    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 0.0 {
        let scale = SYNTH_PEAK / peak;
        for s in &mut samples {
            *s = (*s * scale).clamp(-SYNTH_PEAK, SYNTH_PEAK);
        }
    }
    Waveform::new(samples, sample_rate)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub waveform: Waveform,
    pub speaker_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub utterances: Vec<Utterance>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// One past the largest speaker label present.
    pub fn n_labels(&self) -> usize {
        self.utterances
            .iter()
            .map(|u| u.speaker_id + 1)
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetOptions {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    pub train_fraction: f64,
    pub seed: u64,
}

impl DatasetOptions {
    pub fn new(n_speakers: usize, utts_per_speaker: usize, duration_s: f64, seed: u64) -> Self {
        Self {
            n_speakers,
            utts_per_speaker,
            duration_s,
            sample_rate: DEFAULT_SAMPLE_RATE,
            train_fraction: 0.7,
            seed,
        }
    }

    /// Utterances per speaker that go to the training split.
    pub fn train_per_speaker(&self) -> usize {
        let k = (self.utts_per_speaker as f64 * self.train_fraction).round() as usize;
        k.clamp(1, self.utts_per_speaker.saturating_sub(1).max(1))
    }
}

/// `n` values in `[lo, hi)`, one per equal-width slot, jittered within the
/// middle half of the slot and shuffled. Neighbors differ by at least half
/// a slot width.
fn stratified<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let slot = (hi - lo) / n as f64;
    let mut v: Vec<f64> = (0..n)
        .map(|i| lo + slot * (i as f64 + 0.25 + 0.5 * rng.random::<f64>()))
        .collect();
    v.shuffle(rng);
    v
}

/// Draws `n` speaker profiles with well separated pitch and formants.
pub fn draw_profiles(n: usize, sample_rate: u32, seed: u64) -> Result<Vec<SpeakerProfile>> {
    if n < 1 {
        return param_err("need at least one speaker");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = 0.45 * sample_rate as f64;
    let ranges = [(300.0, 900.0), (900.0, 2400.0), (2400.0, 3600.0)];
    let f0 = stratified(&mut rng, n, 85.0, 320.0);
    let slots: Vec<Vec<f64>> = ranges
        .iter()
        .map(|&(lo, hi): &(f64, f64)| stratified(&mut rng, n, lo.min(cap * 0.5), hi.min(cap)))
        .collect();
    let mut profiles = Vec::with_capacity(n);
    for i in 0..n {
        let formants = vec![
            (slots[0][i], 1.0),
            (slots[1][i], rng.random_range(0.4..0.9)),
            (slots[2][i], rng.random_range(0.2..0.5)),
        ];
        profiles.push(SpeakerProfile {
            speaker_id: i,
            fundamental_hz: f0[i],
            formants,
            jitter: rng.random_range(0.005..0.03),
        });
    }
    Ok(profiles)
}

/// Synthesizes a corpus and splits each speaker's utterances train/test.
pub fn make_dataset_with(opts: &DatasetOptions) -> Result<(DatasetSplit, DatasetSplit)> {
    if opts.n_speakers < 2 {
        return param_err(format!("need at least 2 speakers, got {}", opts.n_speakers));
    }
    if opts.utts_per_speaker < 2 {
        return param_err(format!(
            "need at least 2 utterances per speaker to split, got {}",
            opts.utts_per_speaker
        ));
    }
    if !(opts.train_fraction > 0.0 && opts.train_fraction < 1.0) {
        return param_err(format!("train fraction {} outside (0, 1)", opts.train_fraction));
    }
    let profiles = draw_profiles(opts.n_speakers, opts.sample_rate, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_da7a);
    let n_train = opts.train_per_speaker();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for profile in &profiles {
        for u in 0..opts.utts_per_speaker {
            let waveform =
                synth_utterance(profile, opts.duration_s, opts.sample_rate, rng.next_u64())?;
            let utt = Utterance {
                waveform,
                speaker_id: profile.speaker_id,
            };
            if u < n_train {
                train.push(utt);
            } else {
                test.push(utt);
            }
        }
    }
    Ok((
        DatasetSplit {
            utterances: train,
            seed: opts.seed,
        },
        DatasetSplit {
            utterances: test,
            seed: opts.seed,
        },
    ))
}

pub fn make_dataset(
    n_speakers: usize,
    utts_per_speaker: usize,
    duration_s: f64,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit)> {
    make_dataset_with(&DatasetOptions::new(n_speakers, utts_per_speaker, duration_s, seed))
}
