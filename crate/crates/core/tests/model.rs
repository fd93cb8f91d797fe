//! Whole-model properties: gradients, composition, invariances.

mod common;

use common::{rand_tensor, rng};
use rand::Rng;
use tfn::dsp::{hz_to_mel, MfccConfig, MfccExtractor};
use tfn::gradcheck::{central_diff, grads_close};
use tfn::layers::*;
use tfn::model::*;
use tfn::sincfilter::sinc_forward;

fn tiny(branches: Branches) -> ModelConfig {
    ModelConfig {
        branches,
        n_sinc_filters: 4,
        sinc_kernel_len: 15,
        time_conv_blocks: vec![ConvSpec::new(4, 3, 1), ConvSpec::new(3, 3, 2)],
        freq_conv_blocks: vec![ConvSpec::new(4, 3, 1)],
        class_space_dim: 6,
        n_speakers: 3,
        mfcc: MfccConfig {
            frame_len_ms: 4.0,
            hop_ms: 2.0,
            n_fft: 64,
            n_mels: 8,
            n_coeffs: 5,
            ..MfccConfig::default()
        },
        chunk_ms: 16.0,
        ..ModelConfig::default()
    }
}

fn chunks(r: &mut rand_chacha::ChaCha8Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..len).map(|_| r.random_range(-0.9..0.9)).collect())
        .collect()
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

fn family(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Up to 10 random entries of every parameter tensor, compared per layer
/// family (sinc, time, freq, fusion/single, head).
#[test]
fn whole_model_finite_difference_spot_check() {
    for (branches, mode) in [
        (Branches::Both, Mode::Training),
        (Branches::Both, Mode::Inference),
        (Branches::TimeOnly, Mode::Training),
        (Branches::FreqOnly, Mode::Training),
    ] {
        let mut r = rng(11);
        let mut model = build_model(&tiny(branches), 4).unwrap();
        model.set_mode(mode);
        if let Some(bank) = &mut model.sinc {
            // mel initialization puts the outer edges exactly on the f_min and
            // Nyquist kinks of the reparameterization; step inside them
            let bands: Vec<(f64, f64)> = bank.cutoffs_hz().iter().map(|&(a, b)| (a + 7.0, b - 7.0)).collect();
            bank.set_cutoffs_hz(&bands).unwrap();
        }
        if mode == Mode::Inference {
            for b in model.buffers_mut() {
                for v in b.data_mut() {
                    *v = r.random_range(0.5..1.5);
                }
            }
        }
        let xs = chunks(&mut r, 4, model.config.chunk_len());
        let labels = [0, 2, 1, 2];
        let (_, grads, _) = model.loss_and_grads(&refs(&xs), &labels).unwrap();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();

        let mut per_family: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
        for (k, name) in names.iter().enumerate() {
            let numel = grads[k].numel();
            let picks: Vec<usize> = (0..numel.min(10)).map(|_| r.random_range(0..numel)).collect();
            let h = if name.starts_with("sinc") { 1e-4 / model.config.sample_rate as f64 } else { 1e-6 };
            for &i in &picks {
                let base = [model.named_params()[k].1.data()[i]];
                let num = central_diff(&base, h, |v| {
                    let mut m = model.clone();
                    m.params_mut()[k].data_mut()[i] = v[0];
                    m.loss_and_grads(&refs(&xs), &labels).unwrap().0
                })[0];
                let fam = family(name).to_string();
                match per_family.iter_mut().find(|(f, _, _)| *f == fam) {
                    Some((_, a, n)) => {
                        a.push(grads[k].data()[i]);
                        n.push(num);
                    }
                    None => per_family.push((fam, vec![grads[k].data()[i]], vec![num])),
                }
            }
        }
        for (fam, a, n) in &per_family {
            assert!(
                grads_close(a, n, 1e-3, 1e-7),
                "{branches} {mode:?} family {fam}: analytic {a:?} numeric {n:?}"
            );
        }
    }
}

#[test]
fn batch_gradient_is_the_mean_of_per_chunk_gradients() {
    for branches in Branches::ALL {
        let mut r = rng(3);
        let mut model = build_model(&tiny(branches), 9).unwrap();
        model.set_mode(Mode::Inference);
        let xs = chunks(&mut r, 2, model.config.chunk_len());
        for (pair, labels) in [([0, 0], [1, 1]), ([0, 1], [2, 0])] {
            let batch = [xs[pair[0]].as_slice(), xs[pair[1]].as_slice()];
            let (_, g, _) = model.loss_and_grads(&batch, &labels).unwrap();
            let (_, g0, _) = model.loss_and_grads(&batch[..1], &labels[..1]).unwrap();
            let (_, g1, _) = model.loss_and_grads(&batch[1..], &labels[1..]).unwrap();
            for ((gb, a), b) in g.iter().zip(&g0).zip(&g1) {
                for ((v, x), y) in gb.data().iter().zip(a.data()).zip(b.data()) {
                    assert!((v - 0.5 * (x + y)).abs() < 1e-10, "{branches}");
                }
            }
        }
    }
}

#[test]
fn every_parameter_is_reachable() {
    // Inference mode: under batch statistics, biases directly ahead of a
    // batch norm have an identically zero gradient by construction.
    for draw in 0..3 {
        let mut r = rng(100 + draw);
        let mut model = build_model(&tiny(Branches::Both), draw).unwrap();
        model.set_mode(Mode::Inference);
        let xs = chunks(&mut r, 3, model.config.chunk_len());
        let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..3)).collect();
        let (_, grads, _) = model.loss_and_grads(&refs(&xs), &labels).unwrap();
        for ((name, _), g) in model.named_params().iter().zip(&grads) {
            assert!(g.data().iter().any(|&v| v != 0.0), "draw {draw}: {name} got no gradient");
        }
    }
}

#[test]
fn freq_only_model_has_no_sinc_parameters() {
    let model = build_model(&tiny(Branches::FreqOnly), 1).unwrap();
    assert!(model.sinc.is_none());
    assert!(model.named_params().iter().all(|(n, _)| !n.starts_with("sinc")));
}

#[test]
fn forward_is_the_composition_of_the_submodules() {
    let mut r = rng(8);
    let mut model = build_model(&tiny(Branches::Both), 2).unwrap();
    model.set_mode(Mode::Inference);
    for b in model.buffers_mut() {
        for v in b.data_mut() {
            *v = r.random_range(0.5..1.5);
        }
    }
    let xs = chunks(&mut r, 2, model.config.chunk_len());
    let (logits, _) = model.forward_batch(&refs(&xs)).unwrap();

    let block = |h: &Tensor, b: &ConvBlock| {
        let z = conv1d_forward(h, &b.conv).unwrap();
        relu_forward(&batchnorm_normalize(&z, &b.bn).unwrap().0)
    };
    let x = Tensor::new(vec![2, 1, model.config.chunk_len()], xs.concat()).unwrap();
    let s = sinc_forward(&x, model.sinc.as_ref().unwrap()).unwrap();
    let mut h = maxpool1d_forward(&abs_forward(&s), SINC_POOL, SINC_POOL).unwrap().0;
    for b in &model.time_blocks {
        h = block(&h, b);
    }
    let t_emb = mean_pool_forward(&h).unwrap();
    let mut h = model.mfcc_input(&refs(&xs)).unwrap();
    for b in &model.freq_blocks {
        h = block(&h, b);
    }
    let f_emb = mean_pool_forward(&h).unwrap();
    let fused = model.fusion.as_ref().unwrap().forward(&t_emb, &f_emb).unwrap().0;
    let expect = linear_forward(&fused, &model.head).unwrap();
    assert_eq!(logits.data(), expect.data());
}

#[test]
fn mfcc_channels_are_the_transposed_frames() {
    let mut r = rng(5);
    let model = build_model(&tiny(Branches::FreqOnly), 2).unwrap();
    let xs = chunks(&mut r, 1, model.config.chunk_len());
    let input = model.mfcc_input(&refs(&xs)).unwrap();
    let frames = MfccExtractor::new(&model.config.mfcc, 16000).unwrap().mfcc(&xs[0]).unwrap();
    let (c, f) = (input.shape()[1], input.shape()[2]);
    for k in 0..c {
        for t in 0..f {
            assert_eq!(input.data()[k * f + t], frames.coeffs.get(t, k));
        }
    }
}

/// A signal whose period divides the hop has identical MFCC frames after a
/// one-hop shift, so a frequency-only model cannot tell the two apart.
#[test]
fn freq_only_logits_ignore_hop_periodic_shifts() {
    let cfg = ModelConfig {
        branches: Branches::FreqOnly,
        ..ModelConfig::default()
    };
    let mut model = build_model(&cfg, 3).unwrap();
    model.set_mode(Mode::Inference);
    let hop = cfg.mfcc.hop(cfg.sample_rate);
    let len = cfg.chunk_len();
    // 100 Hz fundamental: period 160 samples = one 10 ms hop
    let period = 160;
    assert_eq!(hop % period, 0);
    let signal: Vec<f64> = (0..len + hop)
        .map(|n| {
            let ph = 2.0 * std::f64::consts::PI * (n % period) as f64 / period as f64;
            0.5 * ph.sin() + 0.3 * (3.0 * ph + 0.4).cos() + 0.1 * (7.0 * ph).sin()
        })
        .collect();
    let a = &signal[..len];
    let b = &signal[hop..hop + len];
    let ex = MfccExtractor::new(&cfg.mfcc, cfg.sample_rate).unwrap();
    assert_eq!(ex.mfcc(a).unwrap().coeffs.data, ex.mfcc(b).unwrap().coeffs.data);
    assert_eq!(model.forward(a).unwrap().data(), model.forward(b).unwrap().data());
}

#[test]
fn inference_forward_is_deterministic_and_pure() {
    let mut r = rng(1);
    let mut model = build_model(&tiny(Branches::Both), 2).unwrap();
    model.set_mode(Mode::Inference);
    let xs = chunks(&mut r, 1, model.config.chunk_len());
    let before: Vec<Vec<f64>> = model.named_buffers().iter().map(|(_, t)| t.data().to_vec()).collect();
    let a = model.forward(&xs[0]).unwrap();
    let b = model.forward(&xs[0]).unwrap();
    assert_eq!(a.data(), b.data());
    let after: Vec<Vec<f64>> = model.named_buffers().iter().map(|(_, t)| t.data().to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn sinc_cutoffs_start_mel_spaced() {
    let cfg = ModelConfig::default();
    let model = build_model(&cfg, 0).unwrap();
    let bands = model.sinc.as_ref().unwrap().cutoffs_hz();
    assert_eq!(bands.len(), cfg.n_sinc_filters);
    // adjacent bands share edges and the edges are equally spaced in mel
    let mut edges: Vec<f64> = bands.iter().map(|b| b.0).collect();
    edges.push(bands.last().unwrap().1);
    for w in bands.windows(2) {
        assert!((w[0].1 - w[1].0).abs() < 1e-6);
    }
    let mels: Vec<f64> = edges.iter().map(|&f| hz_to_mel(f).unwrap()).collect();
    let step = mels[1] - mels[0];
    for w in mels.windows(2) {
        assert!(((w[1] - w[0]) - step).abs() < 1e-6 * step, "{mels:?}");
    }
}

#[test]
fn training_mode_forward_does_not_touch_running_stats_until_committed() {
    let mut r = rng(2);
    let mut model = build_model(&tiny(Branches::Both), 2).unwrap();
    let xs = chunks(&mut r, 3, model.config.chunk_len());
    let before: Vec<Vec<f64>> = model.named_buffers().iter().map(|(_, t)| t.data().to_vec()).collect();
    let (_, cache) = model.forward_batch(&refs(&xs)).unwrap();
    let mid: Vec<Vec<f64>> = model.named_buffers().iter().map(|(_, t)| t.data().to_vec()).collect();
    assert_eq!(before, mid);
    model.commit_stats(&cache);
    let after: Vec<Vec<f64>> = model.named_buffers().iter().map(|(_, t)| t.data().to_vec()).collect();
    assert_ne!(before, after);
}

#[test]
fn random_tensors_helper_is_shape_correct() {
    let t = rand_tensor(&mut rng(0), &[2, 3]);
    assert_eq!(t.shape(), &[2, 3]);
}
