//! `tfn` command line: `synth`, `train`, `eval`, `filters`.
//!
//! Every failure ends in one stderr line `error[<category>]: <message>` and
//! a nonzero exit status.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::audio::{make_dataset_with, read_wav, write_wav, DatasetSplit, Utterance};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{param_err, Result, TfnError};
use crate::fusion::FusionType;
use crate::layers::Mode;
use crate::model::{build_model, Branches};
use crate::train::{chunk_logits, cer_from_logits, fit, logits_csv, TrainState, METRICS_HEADER};

pub const MANIFEST_HEADER: &str = "path,speaker_id,split";

#[derive(Debug, Parser)]
#[command(name = "tfn", version, about = "Time-frequency network speaker identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (key = value lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    outdir: Option<PathBuf>,
    /// Seed (dataset seed for synth, training seed for train).
    #[arg(long)]
    seed: Option<u64>,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a speaker dataset: WAV files plus manifest.csv.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        speakers: Option<usize>,
        #[arg(long)]
        utts: Option<usize>,
        /// Utterance length in seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Train a model on a manifest; writes resolved.cfg, metrics.csv and
    /// per-epoch checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// time_only | freq_only | both
        #[arg(long)]
        branches: Option<Branches>,
        /// early | middle | late
        #[arg(long)]
        fusion: Option<FusionType>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Number of per-epoch checkpoints to keep.
        #[arg(long)]
        keep_last: Option<usize>,
    },
    /// Evaluate a checkpoint; prints both error rates and writes logits.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Which manifest rows to evaluate: test | train | all
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Export the learned sinc filters' magnitude responses as CSV.
    Filters {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

/// Process entry point; returns the exit status.
pub fn main_entry() -> i32 {
    run_args(std::env::args_os())
}

pub fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return 2;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.detail().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            1
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            common,
            speakers,
            utts,
            duration,
        } => cmd_synth(&common, speakers, utts, duration),
        Command::Train {
            common,
            manifest,
            branches,
            fusion,
            epochs,
            keep_last,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(b) = branches {
                cfg.model.branches = b;
            }
            if let Some(f) = fusion {
                cfg.model.fusion = f;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(k) = keep_last {
                cfg.train.keep_last = k;
            }
            if manifest.is_some() {
                cfg.manifest = manifest;
            }
            if common.outdir.is_some() {
                cfg.outdir = common.outdir.clone();
            }
            cmd_train(&cfg, common.force)
        }
        Command::Eval {
            common,
            checkpoint,
            manifest,
            split,
        } => cmd_eval(&common, &checkpoint, manifest, &split),
        Command::Filters { common, checkpoint } => cmd_filters(&common, &checkpoint),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
fn prepare_outdir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return param_err(format!("output path {} is not a directory", dir.display()));
        }
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return param_err(format!(
                "output directory {} is not empty (use --force to write into it)",
                dir.display()
            ));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn cmd_synth(common: &Common, speakers: Option<usize>, utts: Option<usize>, duration: Option<f64>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = speakers {
        cfg.model.n_speakers = s;
    }
    if let Some(u) = utts {
        cfg.data.utts_per_speaker = u;
    }
    if let Some(d) = duration {
        cfg.data.duration_s = d;
    }
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    let outdir = common
        .outdir
        .clone()
        .ok_or_else(|| TfnError::Parameter("synth needs --outdir".into()))?;
    let (train, test) = make_dataset_with(&cfg.dataset_options())?;
    prepare_outdir(&outdir, common.force)?;
    let manifest = write_dataset(&outdir, &train, &test)?;
    println!(
        "wrote {} train + {} test utterances; manifest {}",
        train.len(),
        test.len(),
        manifest.display()
    );
    Ok(())
}

/// Writes `wav/<split>_spkNNN_uttNNN.wav` files and `manifest.csv` under
/// `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, train: &DatasetSplit, test: &DatasetSplit) -> Result<PathBuf> {
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir)?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (split, data) in [("train", train), ("test", test)] {
        let mut per_speaker = std::collections::BTreeMap::<usize, usize>::new();
        for u in &data.utterances {
            let n = per_speaker.entry(u.speaker_id).or_default();
            let rel = format!("wav/{split}_spk{:03}_utt{:03}.wav", u.speaker_id, *n);
            *n += 1;
            write_wav(&u.waveform, dir.join(&rel))?;
            let _ = writeln!(manifest, "{rel},{},{split}", u.speaker_id);
        }
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest)?;
    Ok(path)
}

/// Reads a manifest; WAV paths are relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    let text = fs::read_to_string(path)
        .map_err(|e| TfnError::Parameter(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(TfnError::Format(format!(
            "manifest {} must start with `{MANIFEST_HEADER}`",
            path.display()
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || TfnError::Format(format!("manifest line {}: {line:?}", n + 2));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [rel, spk, split] = fields[..] else {
            return Err(bad());
        };
        let speaker_id: usize = spk.parse().map_err(|_| bad())?;
        let utt = Utterance {
            waveform: read_wav(base.join(rel))?,
            speaker_id,
        };
        match split {
            "train" => train.push(utt),
            "test" => test.push(utt),
            _ => return Err(bad()),
        }
    }
    Ok((
        DatasetSplit {
            utterances: train,
            seed: 0,
        },
        DatasetSplit {
            utterances: test,
            seed: 0,
        },
    ))
}

fn check_labels(cfg: &RunConfig, splits: &[&DatasetSplit]) -> Result<()> {
    let max = splits.iter().map(|s| s.n_labels()).max().unwrap_or(0);
    if max > cfg.model.n_speakers {
        return Err(TfnError::Config(format!(
            "n_speakers = {} but the manifest has speaker id {}",
            cfg.model.n_speakers,
            max - 1
        )));
    }
    Ok(())
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch{epoch:04}.tfn")
}

fn prune_checkpoints(outdir: &Path, epoch: usize, keep: usize) -> Result<()> {
    if epoch > keep {
        let old = outdir.join(checkpoint_name(epoch - keep));
        if old.exists() {
            fs::remove_file(old)?;
        }
    }
    Ok(())
}

/// Full training run into `outdir`: resolved.cfg, metrics.csv (one row per
/// epoch) and per-epoch checkpoints, of which the last `keep_last` remain.
pub fn run_training(
    cfg: &RunConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    outdir: &Path,
) -> Result<TrainState> {
    cfg.validate()?;
    check_labels(cfg, &[train, test])?;
    fs::create_dir_all(outdir)?;
    let text = cfg.to_text();
    fs::write(outdir.join("resolved.cfg"), &text)?;
    let metrics_path = outdir.join("metrics.csv");
    fs::write(&metrics_path, format!("{METRICS_HEADER}\n"))?;

    let model = build_model(&cfg.model, cfg.train.seed)?;
    let t = &cfg.train;
    let mut state = TrainState::new(model, t.lr, t.batch_size, t.epochs, t.seed);
    state.adam.beta1 = t.beta1;
    state.adam.beta2 = t.beta2;
    state.adam.eps = t.eps;
    fit(&mut state, train, test, |st, row| {
        let mut f = fs::OpenOptions::new().append(true).open(&metrics_path)?;
        std::io::Write::write_all(&mut f, format!("{}\n", row.csv_row()).as_bytes())?;
        save_checkpoint(outdir.join(checkpoint_name(row.epoch)), &st.model, &text, row.epoch as u64)?;
        prune_checkpoints(outdir, row.epoch, t.keep_last)?;
        println!(
            "epoch {}/{} train_loss={:.6} chunk_cer={:.4} sentence_cer={:.4}",
            row.epoch, st.max_epochs, row.train_loss, row.chunk_cer, row.sentence_cer
        );
        Ok(())
    })?;
    Ok(state)
}

fn cmd_train(cfg: &RunConfig, force: bool) -> Result<()> {
    cfg.validate()?;
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| TfnError::Config("no dataset: pass --manifest or set `manifest`".into()))?;
    let outdir = cfg
        .outdir
        .clone()
        .ok_or_else(|| TfnError::Config("no output directory: pass --outdir or set `outdir`".into()))?;
    let (train, test) = load_manifest(&manifest)?;
    check_labels(cfg, &[&train, &test])?;
    prepare_outdir(&outdir, force)?;
    run_training(cfg, &train, &test, &outdir)?;
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path, manifest: Option<PathBuf>, split: &str) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let ck_cfg = ck.config()?;
    let (cfg, mut model) = match &common.config {
        Some(p) => {
            let cfg = RunConfig::load(p)?;
            let mut model = build_model(&cfg.model, cfg.train.seed)?;
            ck.apply_to(&mut model)?;
            (cfg, model)
        }
        None => (ck_cfg.clone(), ck.to_model()?),
    };
    model.set_mode(Mode::Inference);
    let manifest = manifest
        .or(cfg.manifest.clone())
        .ok_or_else(|| TfnError::Config("no dataset: pass --manifest".into()))?;
    let (train, test) = load_manifest(&manifest)?;
    let data = match split {
        "test" => test,
        "train" => train,
        "all" => DatasetSplit {
            utterances: train.utterances.into_iter().chain(test.utterances).collect(),
            seed: 0,
        },
        other => return param_err(format!("unknown split {other:?} (expected test|train|all)")),
    };
    check_labels(&cfg, &[&data])?;
    let logits = chunk_logits(&model, &data)?;
    let (sentence_cer, chunk_cer) = cer_from_logits(&logits)?;
    let outdir = common
        .outdir
        .clone()
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&outdir)?;
    let path = outdir.join("logits.csv");
    fs::write(&path, logits_csv(&logits))?;
    println!("sentence_cer={sentence_cer} chunk_cer={chunk_cer}");
    println!("logits written to {}", path.display());
    Ok(())
}

fn cmd_filters(common: &Common, checkpoint: &Path) -> Result<()> {
    let model = load_checkpoint(checkpoint)?.to_model()?;
    let bank = model.sinc.as_ref().ok_or_else(|| {
        TfnError::Parameter(format!(
            "checkpoint has no sinc filter bank (branches = {}); only time_only and both models have one",
            model.config.branches
        ))
    })?;
    let outdir = common
        .outdir
        .clone()
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&outdir)?;
    let path = outdir.join("filters.csv");
    fs::write(&path, bank.dump_response())?;
    println!("wrote {} filter responses to {}", bank.n_filters(), path.display());
    Ok(())
}
