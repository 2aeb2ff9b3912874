use std::fs;
use std::path::Path;

use noisim_core::audio::{read_segment, synth_corpus, write_corpus, CorpusManifest, Domain, SynthProfile};
use noisim_core::checkpoint;
use noisim_core::losses::{total_generator_value, LossWeights};
use noisim_core::models::ArchPlan;
use noisim_core::trainer::{
    run_training, simulate, stack_batch, step_rng, train, EpochSampler, SimulateOptions, TrainConfig, TrainState,
    TrainingSet,
};
use noisim_core::Error;
use noisim_diffcore::{AdamState, Graph, Mode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn small_config() -> TrainConfig {
    TrainConfig {
        arch: ArchPlan::tiny(),
        steps: 3,
        seed: 5,
        patches_per_layer: 16,
        checkpoint_interval: 2,
        clean_manifest: "clean.tsv".into(),
        noisy_manifest: "noisy.tsv".into(),
        ..TrainConfig::default()
    }
}

/// Writes the smoke corpus and a config next to it.
fn corpus_dir(cfg: &TrainConfig) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&SynthProfile::by_name("smoke").unwrap(), 3).unwrap();
    write_corpus(&corpus, dir.path()).unwrap();
    fs::write(dir.path().join("config.json"), cfg.to_json()).unwrap();
    dir
}

fn random_batch(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 1, h, w], |_| rng.random_range(-1.0..1.0))
}

fn small_state(weights: LossWeights) -> TrainState {
    let cfg = TrainConfig {
        weights,
        ..small_config()
    };
    TrainState::new(cfg, noisim_core::audio::NormStats::new(0.0, 2.0).unwrap()).unwrap()
}

#[test]
fn config_validation() {
    assert!(small_config().validate().is_ok());
    assert!(matches!(TrainConfig { steps: 0, ..small_config() }.validate(), Err(Error::Config(_))));
    assert!(TrainConfig { batch_size: 0, ..small_config() }.validate().is_err());
    assert!(TrainConfig { clean_manifest: "".into(), ..small_config() }.validate().is_err());
    let mut stft = small_config().stft;
    stft.fft_size = 512;
    assert!(TrainConfig { stft, ..small_config() }.validate().is_err());
}

#[test]
fn config_json_round_trip_and_unknown_keys() {
    let c = small_config();
    assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
    let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
    v["learning_rate"] = serde_json::json!(0.1);
    assert!(matches!(TrainConfig::from_json(&v.to_string()), Err(Error::Config(_))));
    let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
    v["weights"]["gamma"] = serde_json::json!(1.0);
    assert!(TrainConfig::from_json(&v.to_string()).is_err());
}

#[test]
fn config_defaults() {
    let d = TrainConfig::default();
    assert_eq!((d.weights.lambda, d.weights.omega, d.weights.tau), (1.0, 1.0, 0.07));
    assert_eq!((d.adam.lr, d.adam.beta1, d.adam.beta2), (0.002, 0.5, 0.999));
    assert_eq!(d.batch_size, 1);
    assert_eq!(d.patches_per_layer, 256);
}

#[test]
fn identical_steps_give_identical_reports() {
    let x = random_batch(1, 33, 32, 1);
    let y = random_batch(1, 33, 32, 2);
    let mut a = small_state(LossWeights::default());
    let mut b = a.clone();
    let ra = a.train_step(&x, &y, &mut step_rng(1, 0)).unwrap();
    let rb = b.train_step(&x, &y, &mut step_rng(1, 0)).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(a, b);
}

#[test]
fn one_optimizer_step_per_network() {
    let x = random_batch(1, 33, 32, 3);
    let y = random_batch(1, 33, 32, 4);
    let mut s = small_state(LossWeights::default());
    for k in 1..=2u64 {
        s.train_step(&x, &y, &mut step_rng(0, k)).unwrap();
        assert_eq!((s.opt_g.t, s.opt_d.t, s.opt_h.t, s.step), (k, k, k, k));
    }
}

#[test]
fn discriminator_update_sends_nothing_into_the_generator() {
    let x = random_batch(1, 33, 32, 5);
    let y = random_batch(1, 33, 32, 6);
    let mut s = small_state(LossWeights::default());
    let before = s.generator.clone();
    let d = s.discriminator_step(&x, &y, &mut step_rng(0, 0)).unwrap();
    assert_eq!(d.generator_grad_max, 0.0);
    assert_eq!(s.generator, before);
    assert!((0.0..=1.0).contains(&d.real_mean) && (0.0..=1.0).contains(&d.fake_mean));
}

#[test]
fn report_total_matches_weighted_components() {
    let x = random_batch(2, 33, 32, 7);
    let y = random_batch(2, 33, 32, 8);
    let w = LossWeights {
        lambda: 2.0,
        omega: 0.5,
        tau: 0.07,
    };
    let mut s = small_state(w);
    let r = s.train_step(&x, &y, &mut step_rng(0, 0)).unwrap();
    assert!((r.l_total - total_generator_value(r.l_gan_g, r.l_mpc_x, r.l_mpc_y, &w)).abs() < 1e-6);
    assert!(r.is_finite());
}

#[test]
fn null_weights_reduce_to_the_adversarial_gradient() {
    let x = random_batch(1, 33, 32, 9);
    let y = random_batch(1, 33, 32, 10);
    let mut s = small_state(LossWeights {
        lambda: 0.0,
        omega: 0.0,
        tau: 0.07,
    });
    let start = s.clone();
    s.generator_step(&x, &y, &mut step_rng(3, 0)).unwrap();

    // replay the adversarial term alone; the first draws from the step
    // stream are the dropout masks of G(x), so the masks agree
    let mut g = Graph::new();
    let gb = start.generator.params.bind(&mut g, true);
    let db = start.discriminator.params.bind(&mut g, false);
    let xi = g.input(x);
    let out = start.generator.forward(&mut g, &gb, xi, Mode::Train, &mut step_rng(3, 0)).unwrap();
    let fake = start.discriminator.forward(&mut g, &db, out.output).unwrap();
    let loss = noisim_core::losses::gan_loss_g(&mut g, fake);
    g.backward(loss).unwrap();
    let grads = start.generator.params.grads(&g, &gb);
    let mut expected = start.generator.params.clone();
    let mut opt: AdamState = start.opt_g.clone();
    opt.step(expected.tensors_mut(), &grads).unwrap();

    assert_eq!(s.generator.params, expected);
    assert_eq!(s.discriminator, start.discriminator);
    // heads received zero gradient, and Adam leaves them in place
    assert_eq!(s.heads.params, start.heads.params);
}

#[test]
fn epoch_sampler_is_a_permutation_per_epoch() {
    let mut s = EpochSampler::new(7, 11, 1);
    for epoch in 0..4u64 {
        let mut seen: Vec<usize> = (0..7).map(|i| s.at(epoch * 7 + i)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
    }
    assert_ne!(s.epoch_order(0), s.epoch_order(1));
    assert_eq!(s.batch(3, 2), vec![s.at(6), s.at(7)]);
    assert_eq!(EpochSampler::new(7, 11, 1).epoch_order(2), s.epoch_order(2));
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let x = random_batch(1, 33, 32, 11);
    let y = random_batch(1, 33, 32, 12);
    let mut s = small_state(LossWeights::default());
    s.train_step(&x, &y, &mut step_rng(0, 0)).unwrap();
    let p1 = dir.path().join("a.sgan");
    let p2 = dir.path().join("b.sgan");
    s.save(&p1).unwrap();
    let loaded = TrainState::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    assert_eq!(loaded.step, 1);
    assert_eq!(loaded.config, s.config);
    assert_eq!(loaded.stats, s.stats);
    assert_eq!((loaded.opt_g.t, loaded.opt_d.t, loaded.opt_h.t), (1, 1, 1));
    let c = checkpoint::load(&p1).unwrap();
    assert_eq!(c.tensors.len(), s.tensor_count());
    let stored: usize = c.tensors.iter().map(|(_, t)| t.len()).sum();
    let params = s.generator.params.numel() + s.discriminator.params.numel() + s.heads.params.numel();
    assert_eq!(stored, 3 * params);
    assert_eq!(
        loaded.generator.params.numel() + loaded.discriminator.params.numel() + loaded.heads.params.numel(),
        params
    );
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_state(LossWeights::default());
    let p = dir.path().join("a.sgan");
    s.save(&p).unwrap();
    let bytes = fs::read(&p).unwrap();
    for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
        fs::write(&p, &bytes[..cut]).unwrap();
        assert!(matches!(TrainState::load(&p), Err(Error::Checkpoint { .. })), "cut {cut}");
    }
    let mut wrong = bytes.clone();
    wrong[4..8].copy_from_slice(&2u32.to_le_bytes());
    fs::write(&p, &wrong).unwrap();
    assert!(matches!(TrainState::load(&p), Err(Error::Checkpoint { offset: 4, .. })));
    assert!(matches!(TrainState::load(dir.path().join("missing.sgan")), Err(Error::Io { .. })));
}

#[test]
fn checkpoint_shapes_are_checked_against_the_config() {
    let s = small_state(LossWeights::default());
    let mut c = s.to_container();
    let (name, t) = c.tensors[0].clone();
    c.tensors[0] = (name, Tensor::zeros(&[t.len() + 1]));
    assert!(matches!(TrainState::from_container(&c), Err(Error::Format(_))));
    let mut c = s.to_container();
    c.tensors.pop();
    assert!(TrainState::from_container(&c).is_err());
}

#[test]
fn end_to_end_training_is_reproducible() {
    let cfg = small_config();
    let dir = corpus_dir(&cfg);
    let loaded = TrainConfig::load(dir.path().join("config.json")).unwrap();
    assert!(loaded.clean_manifest.is_absolute() || loaded.clean_manifest.starts_with(dir.path()));
    let out_a = dir.path().join("run_a");
    let out_b = dir.path().join("run_b");
    let a = train(&loaded, &out_a).unwrap();
    train(&loaded, &out_b).unwrap();
    assert_eq!(a.step, 3);
    assert_eq!(fs::read(out_a.join("final.sgan")).unwrap(), fs::read(out_b.join("final.sgan")).unwrap());
    assert!(out_a.join("ckpt_000002.sgan").exists());
    assert_eq!(fs::read_to_string(out_a.join("metrics.csv")).unwrap(), fs::read_to_string(out_b.join("metrics.csv")).unwrap());
    check_metrics(&out_a.join("metrics.csv"), 3);
}

fn check_metrics(path: &Path, rows: usize) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "step,l_gan_d,l_gan_g,l_mpc_x,l_mpc_y,l_total,d_real_mean,d_fake_mean");
    let mut last = 0;
    let mut n = 0;
    for line in lines {
        let fields: Vec<f64> = line.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields.len(), 8);
        assert!(fields.iter().all(|v| v.is_finite()), "{line}");
        assert!(fields[0] as u64 > last);
        last = fields[0] as u64;
        n += 1;
    }
    assert_eq!(n, rows);
}

#[test]
fn unreadable_entries_are_skipped_and_empty_corpora_fail() {
    let cfg = small_config();
    let dir = corpus_dir(&cfg);
    let clean_path = dir.path().join("clean.tsv");
    let mut clean = CorpusManifest::load(&clean_path).unwrap();
    let broken = dir.path().join("clean").join("broken.wav");
    fs::write(&broken, b"not audio").unwrap();
    clean.entries.push(noisim_core::audio::ManifestEntry {
        path: broken,
        domain: Domain::Clean,
        duration: 1.0,
        labels: None,
    });
    clean.save(&clean_path).unwrap();
    let mut c = TrainConfig::load(dir.path().join("config.json")).unwrap();
    let data = TrainingSet::load(&c).unwrap();
    assert_eq!(data.clean.len(), 2);

    let only_broken = CorpusManifest::new(vec![clean.entries.pop().unwrap()]).unwrap();
    only_broken.save(&clean_path).unwrap();
    c.steps = 1;
    assert!(matches!(train(&c, &dir.path().join("out")), Err(Error::EmptyCorpus(_))));
}

#[test]
fn simulation_is_a_repeatable_bijection_over_segments() {
    let cfg = small_config();
    let dir = corpus_dir(&cfg);
    let c = TrainConfig::load(dir.path().join("config.json")).unwrap();
    let _ = train(&c, &dir.path().join("run")).unwrap();
    let state = TrainState::load(dir.path().join("run").join("final.sgan")).unwrap();
    let clean = CorpusManifest::load(&c.clean_manifest).unwrap();
    let out_a = dir.path().join("sim_a");
    let out_b = dir.path().join("sim_b");
    let opts = SimulateOptions {
        wav: true,
        griffin_lim_iterations: 4,
    };
    let m = simulate(&state, &clean, &out_a, &opts).unwrap();
    simulate(&state, &clean, &out_b, &opts).unwrap();
    let data = TrainingSet::load(&c).unwrap();
    assert_eq!(m.len(), data.clean.len());
    for e in &m.entries {
        assert_eq!(e.domain, Domain::Simulated);
        assert_eq!(e.labels.as_ref().map(Vec::len), Some(128));
        let seg = read_segment(&e.path).unwrap();
        assert_eq!(seg.stats, state.stats);
        let stem = e.path.file_stem().unwrap().to_string_lossy().into_owned();
        for ext in ["seg", "pgm", "wav"] {
            let a = fs::read(out_a.join(format!("{stem}.{ext}"))).unwrap();
            let b = fs::read(out_b.join(format!("{stem}.{ext}"))).unwrap();
            assert_eq!(a, b, "{stem}.{ext}");
        }
    }
    assert_eq!(
        fs::read(out_a.join("simulated.tsv")).unwrap(),
        fs::read(out_b.join("simulated.tsv")).unwrap()
    );
    let reloaded = CorpusManifest::load(out_a.join("simulated.tsv")).unwrap();
    assert_eq!(reloaded, m);
}

#[test]
fn simulation_is_eval_mode_generator_output() {
    let s = small_state(LossWeights::default());
    let seg = noisim_core::audio::FeatureSegment::new(
        random_batch(1, 129, 128, 13).into_data().iter().map(|v| v * 0.9).collect(),
        s.stats,
    )
    .unwrap();
    let a = s.simulate_segments(std::slice::from_ref(&seg)).unwrap();
    let mut g = Graph::new();
    let gb = s.generator.params.bind(&mut g, false);
    let xi = g.input(stack_batch(&[&seg]));
    let out = s.generator.forward(&mut g, &gb, xi, Mode::Eval, &mut step_rng(9, 9)).unwrap();
    assert_eq!(a[0].data, g.value(out.output).data());
}

#[test]
fn contrastive_loss_falls_over_300_steps() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(&SynthProfile::band_noise(), 1).unwrap();
    write_corpus(&corpus, dir.path()).unwrap();
    let cfg = TrainConfig {
        arch: ArchPlan::tiny(),
        steps: 300,
        seed: 1,
        patches_per_layer: 64,
        checkpoint_interval: 0,
        clean_manifest: dir.path().join("clean.tsv"),
        noisy_manifest: dir.path().join("noisy.tsv"),
        ..TrainConfig::default()
    };
    let data = TrainingSet::load(&cfg).unwrap();
    let out = dir.path().join("run");
    run_training(&cfg, &data, Some(&out)).unwrap();
    let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mpc: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert_eq!(mpc.len(), 300);
    let early = mpc[..10].iter().sum::<f64>() / 10.0;
    let late = mpc[290..].iter().sum::<f64>() / 10.0;
    assert!(late <= 0.7 * early, "step-10 average {early}, final average {late}");
    check_metrics(&out.join("metrics.csv"), 300);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sampler_batches_cover_each_epoch(len in 1usize..20, seed in 0u64..50, batch in 1usize..5) {
        let mut s = EpochSampler::new(len, seed, 2);
        let total = len * 3;
        let steps = total.div_ceil(batch);
        let drawn: Vec<usize> = (0..steps as u64).flat_map(|k| s.batch(k, batch)).collect();
        for epoch in 0..3 {
            let mut e = drawn[epoch * len..(epoch + 1) * len].to_vec();
            e.sort_unstable();
            prop_assert_eq!(e, (0..len).collect::<Vec<_>>());
        }
    }
}
