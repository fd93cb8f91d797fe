//! Adam, chunked minibatch training and chunk/sentence error rates.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{DatasetSplit, Waveform};
use crate::error::{param_err, shape_err, Result, TfnError};
use crate::layers::{log_softmax, Mode, Tensor};
use crate::model::TfnModel;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    /// First and second moments, one buffer per parameter tensor; empty
    /// until the first step.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One in-place Adam update with bias-corrected moments.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() {
        return shape_err(format!(
            "adam: {} gradients for {} parameters",
            grads.len(),
            params.len()
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return shape_err(format!(
                "adam: gradient {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            ));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len()
        || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
    {
        return shape_err("adam: parameter set changed between steps");
    }

    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((theta, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Start offsets of all full windows of `chunk` samples, `shift` apart.
pub fn chunk_offsets(n_samples: usize, chunk: usize, shift: usize) -> Result<Vec<usize>> {
    if chunk == 0 || shift == 0 {
        return param_err("chunk length and shift must be positive");
    }
    if n_samples < chunk {
        return Err(TfnError::InputTooShort {
            needed: chunk,
            got: n_samples,
        });
    }
    Ok((0..=(n_samples - chunk) / shift).map(|i| i * shift).collect())
}

fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

/// Overlapping fixed-length windows; a trailing partial window is dropped.
pub fn chunk_utterance(w: &Waveform, chunk_ms: f64, shift_ms: f64) -> Result<Vec<&[f64]>> {
    if !(chunk_ms > 0.0 && shift_ms > 0.0) {
        return param_err(format!("chunk ({chunk_ms} ms) and shift ({shift_ms} ms) must be positive"));
    }
    let chunk = ms_to_samples(chunk_ms, w.sample_rate());
    let shift = ms_to_samples(shift_ms, w.sample_rate());
    let x = w.samples();
    Ok(chunk_offsets(x.len(), chunk, shift)?
        .into_iter()
        .map(|o| &x[o..o + chunk])
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub chunk_cer: f64,
    pub sentence_cer: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,chunk_cer,sentence_cer";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch, self.train_loss, self.chunk_cer, self.sentence_cer
        )
    }
}

pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in log {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: TfnModel,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub rng_seed: u64,
    pub metrics_log: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(model: TfnModel, lr: f64, batch_size: usize, max_epochs: usize, rng_seed: u64) -> Self {
        Self {
            model,
            adam: AdamState::new(lr),
            epoch: 0,
            max_epochs,
            batch_size,
            rng_seed,
            metrics_log: Vec::new(),
        }
    }
}

/// Shuffled minibatches of (utterance, offset) pairs. A trailing batch of a
/// single chunk is merged into the one before it, since batch statistics
/// of one example are degenerate.
fn minibatches(
    split: &DatasetSplit,
    chunk: usize,
    shift: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<(usize, usize)>>> {
    let mut all = Vec::new();
    for (u, utt) in split.utterances.iter().enumerate() {
        for o in chunk_offsets(utt.waveform.len(), chunk, shift)? {
            all.push((u, o));
        }
    }
    if all.len() < 2 {
        return Err(TfnError::DegenerateBatch(format!(
            "training set yields {} chunk(s); at least 2 are needed",
            all.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let mut batches: Vec<Vec<(usize, usize)>> =
        all.chunks(batch_size).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    Ok(batches)
}

/// One pass over the training chunks; returns the mean per-batch loss.
pub fn train_epoch(state: &mut TrainState, train: &DatasetSplit) -> Result<f64> {
    if train.is_empty() {
        return param_err("training split is empty");
    }
    if state.batch_size < 2 {
        return param_err(format!("batch_size must be >= 2, got {}", state.batch_size));
    }
    let cfg = state.model.config.clone();
    if let Some(u) = train
        .utterances
        .iter()
        .find(|u| u.waveform.sample_rate() != cfg.sample_rate || u.speaker_id >= cfg.n_speakers)
    {
        return param_err(format!(
            "utterance (speaker {}, {} Hz) incompatible with model ({} speakers, {} Hz)",
            u.speaker_id,
            u.waveform.sample_rate(),
            cfg.n_speakers,
            cfg.sample_rate
        ));
    }
    let (chunk, shift) = (cfg.chunk_len(), cfg.chunk_shift());
    let seed = state.rng_seed.wrapping_add(state.epoch as u64);
    let batches = minibatches(train, chunk, shift, state.batch_size, seed)?;

    state.model.set_mode(Mode::Training);
    let mut total = 0.0;
    for batch in &batches {
        let chunks: Vec<&[f64]> = batch
            .iter()
            .map(|&(u, o)| &train.utterances[u].waveform.samples()[o..o + chunk])
            .collect();
        let labels: Vec<usize> = batch.iter().map(|&(u, _)| train.utterances[u].speaker_id).collect();
        let (loss, grads, cache) = state.model.loss_and_grads(&chunks, &labels)?;
        state.model.commit_stats(&cache);
        adam_step(&mut state.model.params_mut(), &grads, &mut state.adam)?;
        total += loss;
    }
    state.model.set_mode(Mode::Inference);
    state.epoch += 1;
    Ok(total / batches.len() as f64)
}

/// Per-chunk logits of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceLogits {
    pub label: usize,
    /// `[n_chunks × n_speakers]`
    pub logits: Tensor,
}

/// Chunks evaluated per forward call during evaluation.
const EVAL_BATCH: usize = 64;

/// Inference-mode logits for every chunk of every utterance.
pub fn chunk_logits(model: &TfnModel, split: &DatasetSplit) -> Result<Vec<UtteranceLogits>> {
    let owned;
    let model = if model.mode() == Mode::Inference {
        model
    } else {
        let mut m = model.clone();
        m.set_mode(Mode::Inference);
        owned = m;
        &owned
    };
    let cfg = &model.config;
    let k = cfg.n_speakers;
    let mut out = Vec::with_capacity(split.len());
    for utt in &split.utterances {
        if utt.waveform.sample_rate() != cfg.sample_rate {
            return param_err(format!(
                "utterance at {} Hz, model expects {} Hz",
                utt.waveform.sample_rate(),
                cfg.sample_rate
            ));
        }
        let chunks = chunk_utterance(&utt.waveform, cfg.chunk_ms, cfg.chunk_shift_ms)?;
        let mut data = Vec::with_capacity(chunks.len() * k);
        for group in chunks.chunks(EVAL_BATCH) {
            let (logits, _) = model.forward_batch(group)?;
            data.extend_from_slice(logits.data());
        }
        out.push(UtteranceLogits {
            label: utt.speaker_id,
            logits: Tensor::new(vec![chunks.len(), k], data)?,
        });
    }
    Ok(out)
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `(sentence_cer, chunk_cer)` from per-chunk logits. The sentence decision
/// is the argmax of the summed per-chunk log-softmax scores.
pub fn cer_from_logits(utts: &[UtteranceLogits]) -> Result<(f64, f64)> {
    if utts.is_empty() {
        return param_err("cannot evaluate an empty test set");
    }
    let mut wrong_sent = 0usize;
    let mut wrong_chunks = 0usize;
    let mut n_chunks = 0usize;
    for u in utts {
        let [n, k] = u.logits.shape() else {
            return shape_err(format!("logits must be 2-D, got {:?}", u.logits.shape()));
        };
        let (n, k) = (*n, *k);
        if n == 0 {
            return shape_err("utterance without chunks");
        }
        let logp = log_softmax(&u.logits)?;
        let mut score = vec![0.0; k];
        for c in 0..n {
            let row = &u.logits.data()[c * k..(c + 1) * k];
            if argmax(row) != u.label {
                wrong_chunks += 1;
            }
            for (s, l) in score.iter_mut().zip(&logp.data()[c * k..(c + 1) * k]) {
                *s += l;
            }
        }
        n_chunks += n;
        if argmax(&score) != u.label {
            wrong_sent += 1;
        }
    }
    Ok((
        wrong_sent as f64 / utts.len() as f64,
        wrong_chunks as f64 / n_chunks as f64,
    ))
}

pub fn evaluate_cer(model: &TfnModel, test: &DatasetSplit) -> Result<(f64, f64)> {
    if test.is_empty() {
        return param_err("cannot evaluate an empty test set");
    }
    cer_from_logits(&chunk_logits(model, test)?)
}

/// CSV `utterance_id,chunk_index,label,logit_0..logit_{K-1}`.
pub fn logits_csv(utts: &[UtteranceLogits]) -> String {
    let k = utts.first().map_or(0, |u| u.logits.shape()[1]);
    let mut s = String::from("utterance_id,chunk_index,label");
    for i in 0..k {
        let _ = write!(s, ",logit_{i}");
    }
    s.push('\n');
    for (id, u) in utts.iter().enumerate() {
        let k = u.logits.shape()[1];
        for (c, row) in u.logits.data().chunks(k).enumerate() {
            let _ = write!(s, "{id},{c},{}", u.label);
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

/// Trains for `state.max_epochs - state.epoch` epochs, evaluating on `test`
/// after each and calling `on_epoch` with the new metrics row.
pub fn fit<F>(state: &mut TrainState, train: &DatasetSplit, test: &DatasetSplit, mut on_epoch: F) -> Result<()>
where
    F: FnMut(&TrainState, &EpochMetrics) -> Result<()>,
{
    while state.epoch < state.max_epochs {
        let train_loss = train_epoch(state, train)?;
        let (sentence_cer, chunk_cer) = evaluate_cer(&state.model, test)?;
        let row = EpochMetrics {
            epoch: state.epoch,
            train_loss,
            chunk_cer,
            sentence_cer,
        };
        state.metrics_log.push(row);
        on_epoch(state, &row)?;
    }
    Ok(())
}
