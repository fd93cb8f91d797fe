//! End-to-end runs of the `tfn` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tfn::checkpoint::{load_checkpoint, save_checkpoint};
use tfn::config::RunConfig;
use tfn::model::build_model;

const SMALL: &str = "\
# small enough for dozens of epochs per second
n_speakers = 3
n_sinc_filters = 6
sinc_kernel_len = 31
time_conv_blocks = 6:5:1
freq_conv_blocks = 6:3:1
class_space_dim = 8
chunk_ms = 20
chunk_shift_ms = 10
mfcc_frame_len_ms = 4
mfcc_hop_ms = 2
mfcc_n_fft = 64
mfcc_n_mels = 10
mfcc_n_coeffs = 6
batch_size = 8
lr = 0.01
";

fn tfn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tfn")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tfn(args);
    assert!(
        out.status.success(),
        "tfn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit status is nonzero and stderr is a single categorized line.
fn fails(args: &[&str], category: &str) -> String {
    let out = tfn(args);
    assert!(!out.status.success(), "tfn {args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{category}]: ")), "{err}");
    err
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(root: &Path) -> std::path::PathBuf {
    let dir = root.join("data");
    ok(&["synth", "--outdir", s(&dir), "--speakers", "3", "--utts", "4", "--duration", "0.06"]);
    dir.join("manifest.csv")
}

#[test]
fn synth_writes_a_reproducible_split_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--outdir", s(&a)]);
    ok(&["synth", "--outdir", s(&b)]);
    let manifest = fs::read_to_string(a.join("manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().skip(1).collect();
    assert_eq!(manifest.lines().next(), Some("path,speaker_id,split"));
    assert_eq!(rows.len(), 100);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",train")).count(), 70);
    assert_eq!(rows.iter().filter(|r| r.ends_with(",test")).count(), 30);
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.csv")).unwrap());
    for r in &rows {
        let rel = r.split(',').next().unwrap();
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn synth_rejects_bad_requests() {
    let tmp = tempfile::tempdir().unwrap();
    fails(&["synth", "--outdir", s(&tmp.path().join("x")), "--speakers", "1"], "parameter");
    fails(&["synth", "--outdir", s(&tmp.path().join("y")), "--utts", "1"], "parameter");
    fails(&["synth", "--speakers", "4"], "parameter");
    fails(&["synth", "--bogus"], "usage");
    // refuses to overwrite without --force
    let d = tmp.path().join("z");
    ok(&["synth", "--outdir", s(&d), "--speakers", "2", "--utts", "2", "--duration", "0.05"]);
    fails(&["synth", "--outdir", s(&d), "--speakers", "2", "--utts", "2", "--duration", "0.05"], "parameter");
    ok(&["synth", "--outdir", s(&d), "--speakers", "2", "--utts", "2", "--duration", "0.05", "--force"]);
}

#[test]
fn train_eval_and_rerun_from_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_dataset(tmp.path());
    let cfg = tmp.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--outdir", s(&run)]);

    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("epoch,train_loss,chunk_cer,sentence_cer"));
    assert_eq!(metrics.lines().count(), 1 + 24);
    let mut ckpts: Vec<String> = fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".tfn"))
        .collect();
    ckpts.sort();
    assert_eq!(ckpts, ["checkpoint_epoch0023.tfn", "checkpoint_epoch0024.tfn"]);

    // the resolved configuration alone reproduces the run
    let again = tmp.path().join("again");
    ok(&["train", "--config", s(&run.join("resolved.cfg")), "--outdir", s(&again)]);
    assert_eq!(metrics, fs::read_to_string(again.join("metrics.csv")).unwrap());
    let a = load_checkpoint(run.join(&ckpts[1])).unwrap();
    let b = load_checkpoint(again.join(&ckpts[1])).unwrap();
    assert_eq!(a.records, b.records);

    // eval agrees with the last metrics row and dumps one row per chunk
    let last: Vec<f64> = metrics.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let evald = tmp.path().join("eval");
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&run.join(&ckpts[1])),
        "--manifest",
        s(&manifest),
        "--outdir",
        s(&evald),
    ]);
    let line = out.lines().find(|l| l.starts_with("sentence_cer=")).unwrap();
    let vals: Vec<f64> = line.split(' ').map(|kv| kv.split('=').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(vals, [last[3], last[2]]);
    let (_, test) = tfn::cli::load_manifest(&manifest).unwrap();
    let chunks: usize = test.utterances.iter().map(|u| (u.waveform.len() - 320) / 160 + 1).sum();
    let logits = fs::read_to_string(evald.join("logits.csv")).unwrap();
    assert_eq!(logits.lines().count(), 1 + chunks);
    assert_eq!(logits.lines().next(), Some("utterance_id,chunk_index,label,logit_0,logit_1,logit_2"));

    // a non-empty outdir is refused
    fails(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--outdir", s(&run)], "parameter");
}

#[test]
fn train_rejects_bad_configurations() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = small_dataset(tmp.path());
    let cfg = tmp.path().join("late.cfg");
    fs::write(&cfg, format!("{SMALL}class_space_dim = 7\nfusion = late\n")).unwrap();
    let err = fails(
        &["train", "--config", s(&cfg), "--manifest", s(&manifest), "--outdir", s(&tmp.path().join("o1"))],
        "config",
    );
    assert!(err.contains("evenly"), "{err}");

    let bad_key = tmp.path().join("bad.cfg");
    fs::write(&bad_key, "learning_rate = 0.1\n").unwrap();
    let err = fails(&["train", "--config", s(&bad_key), "--manifest", s(&manifest)], "config");
    assert!(err.contains("learning_rate"), "{err}");

    let few = tmp.path().join("few.cfg");
    fs::write(&few, format!("{SMALL}n_speakers = 2\n")).unwrap();
    fails(
        &["train", "--config", s(&few), "--manifest", s(&manifest), "--outdir", s(&tmp.path().join("o2"))],
        "config",
    );
    fails(&["train", "--branches", "spectral"], "usage");
}

#[test]
fn eval_rejects_a_corrupt_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.tfn");
    fs::write(&bad, b"NOPE and some bytes").unwrap();
    fails(&["eval", "--checkpoint", s(&bad)], "load");
    fails(&["filters", "--checkpoint", s(&bad)], "load");
    fails(&["eval", "--checkpoint", s(&tmp.path().join("missing.tfn"))], "load");
}

#[test]
fn filters_of_a_fresh_default_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default();
    let model = build_model(&cfg.model, 0).unwrap();
    let ck = tmp.path().join("init.tfn");
    save_checkpoint(&ck, &model, &cfg.to_text(), 0).unwrap();
    ok(&["filters", "--checkpoint", s(&ck)]);

    let csv = fs::read_to_string(tmp.path().join("filters.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("filter_index,freq_hz,magnitude"));
    let rows: Vec<(usize, f64, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 32 * 8001);
    let mut peaks = Vec::new();
    for filt in rows.chunks(8001) {
        assert!(filt.iter().all(|r| r.0 == filt[0].0));
        let peak = filt.iter().fold(filt[0], |b, r| if r.2 > b.2 { *r } else { b });
        assert!(filt[0].2 < 1e-2 * peak.2, "filter {} passes DC", filt[0].0);
        peaks.push(peak.1);
    }
    assert!(peaks.windows(2).all(|w| w[0] < w[1]), "{peaks:?}");

    // a model without a sinc bank has nothing to export
    let mut freq = RunConfig::default();
    freq.set("branches", "freq_only").unwrap();
    let ck2 = tmp.path().join("freq.tfn");
    save_checkpoint(&ck2, &build_model(&freq.model, 0).unwrap(), &freq.to_text(), 0).unwrap();
    fails(&["filters", "--checkpoint", s(&ck2)], "parameter");
}
