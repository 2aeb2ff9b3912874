use std::f64::consts::PI;

use noisim_core::audio::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// O(N²) DFT magnitude of every windowed frame, independent of the FFT path.
fn direct_dft_magnitude(x: &[f64], n: usize, hop: usize) -> Vec<Vec<f64>> {
    let win: Vec<f64> = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
    let frames = (x.len() - n) / hop + 1;
    (0..frames)
        .map(|t| {
            (0..=n / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for i in 0..n {
                        let v = x[t * hop + i] * win[i];
                        let ang = -2.0 * PI * (k * i) as f64 / n as f64;
                        re += v * ang.cos();
                        im += v * ang.sin();
                    }
                    (re * re + im * im).sqrt()
                })
                .collect()
        })
        .collect()
}

fn assert_matches_oracle(clip: &AudioClip, cfg: &StftConfig, rel: f64) {
    let spec = stft_magnitude(clip, cfg).unwrap();
    let oracle = direct_dft_magnitude(&clip.samples, cfg.fft_size, cfg.hop);
    assert_eq!(spec.frames, oracle.len());
    // exact zeros carry only round-off, so the error is relative to the peak
    let scale = oracle.iter().flatten().cloned().fold(0.0f64, f64::max).max(1e-300);
    for (t, frame) in oracle.iter().enumerate() {
        for (k, &expect) in frame.iter().enumerate() {
            let got = spec.at(k, t);
            assert!(
                (got - expect).abs() <= rel * expect.abs().max(scale),
                "bin {k} frame {t}: {got} vs {expect}"
            );
        }
    }
}

#[test]
fn constant_signal_bin_zero_is_window_sum() {
    let cfg = StftConfig::default();
    let clip = AudioClip::new(vec![1.0; 256 * 3], 8000).unwrap();
    let spec = stft_magnitude(&clip, &cfg).unwrap();
    let wsum: f64 = cfg.window_coeffs().iter().sum();
    for t in 0..spec.frames {
        assert!((spec.at(0, t) - wsum).abs() <= 1e-10 * wsum);
    }
    assert_matches_oracle(&clip, &cfg, 1e-10);
}

#[test]
fn bin_centered_sinusoid_peaks_at_its_bin() {
    let cfg = StftConfig::default();
    let bin = 37;
    let samples: Vec<f64> = (0..2048).map(|i| (2.0 * PI * bin as f64 * i as f64 / 256.0).sin() * 0.5).collect();
    let clip = AudioClip::new(samples, 8000).unwrap();
    let spec = stft_magnitude(&clip, &cfg).unwrap();
    let oracle = direct_dft_magnitude(&clip.samples, 256, 128);
    for t in 0..spec.frames {
        let argmax = (0..spec.bins).max_by(|&a, &b| spec.at(a, t).total_cmp(&spec.at(b, t))).unwrap();
        let oracle_argmax = (0..129).max_by(|&a, &b| oracle[t][a].total_cmp(&oracle[t][b])).unwrap();
        assert_eq!(argmax, bin);
        assert_eq!(oracle_argmax, bin);
    }
}

#[test]
fn stft_matches_direct_dft_on_random_clips() {
    let cfg = StftConfig {
        fft_size: 32,
        hop: 12,
        window: Window::Hann,
    };
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.random_range(32..200);
        let samples = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let clip = AudioClip::new(samples, 8000).unwrap();
        assert_matches_oracle(&clip, &cfg, 1e-8);
    }
}

fn sinusoid_mixture(seed: u64, len: usize) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| (rng.random_range(200.0..3500.0), rng.random_range(0.1..0.3), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let samples = (0..len)
        .map(|i| {
            parts
                .iter()
                .map(|(f, a, p)| a * (2.0 * PI * f * i as f64 / 8000.0 + p).sin())
                .sum()
        })
        .collect();
    AudioClip::new(samples, 8000).unwrap()
}

#[test]
fn griffin_lim_residual_shrinks() {
    let clip = sinusoid_mixture(42, 4096);
    let spec = stft_magnitude(&clip, &StftConfig::default()).unwrap();
    let (out, trace) = griffin_lim_traced(&spec, 60, 8000).unwrap();
    assert_eq!(out.len(), (spec.frames - 1) * 128 + 256);
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9), "residual increased: {:?}", w);
    }
    assert!(trace[59] <= 0.25 * trace[0], "final {} vs initial {}", trace[59], trace[0]);

    let (_, t1) = griffin_lim_traced(&spec, 1, 8000).unwrap();
    let (_, t2) = griffin_lim_traced(&spec, 2, 8000).unwrap();
    assert!(t2[1] <= t1[0]);
}

#[test]
fn griffin_lim_zero_and_contract() {
    let spec = stft_magnitude(&AudioClip::new(vec![0.0; 1024], 8000).unwrap(), &StftConfig::default()).unwrap();
    let out = griffin_lim(&spec, 5, 8000).unwrap();
    assert!(out.samples.iter().all(|&v| v == 0.0));
    assert!(griffin_lim(&spec, 0, 8000).is_err());
}

#[test]
fn synth_is_deterministic_and_byte_identical() {
    let p = SynthProfile::by_name("smoke").unwrap();
    let a = synth_corpus(&p, 9).unwrap();
    let b = synth_corpus(&p, 9).unwrap();
    assert_eq!(a, b);
    let c = synth_corpus(&p, 10).unwrap();
    assert_ne!(a.clean[0].clip, c.clean[0].clip);

    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_corpus(&a, d1.path()).unwrap();
    write_corpus(&b, d2.path()).unwrap();
    for rel in ["clean.tsv", "noisy.tsv", "clean/clean_0000.wav", "noisy/noisy_0001.wav"] {
        assert_eq!(
            std::fs::read(d1.path().join(rel)).unwrap(),
            std::fs::read(d2.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
    let m = CorpusManifest::load(d1.path().join("clean.tsv")).unwrap();
    let clip = read_wav(&m.entries[0].path).unwrap();
    assert_eq!(clip.len(), a.clean[0].clip.len());
    assert_eq!(m.entries[0].labels.as_ref().unwrap().len(), StftConfig::default().frames_for(clip.len()));
}

#[test]
fn synth_rejects_single_class() {
    let mut p = SynthProfile::band_noise();
    p.tone_hz = vec![500.0];
    assert!(matches!(synth_corpus(&p, 0), Err(noisim_core::Error::InvalidProfile(_))));
}

fn domain_band_power(utts: &[SynthUtterance], bins: std::ops::Range<usize>) -> f64 {
    let segs: Vec<RawSegment> = utts
        .iter()
        .flat_map(|u| {
            let s = stft_magnitude(&u.clip, &StftConfig::default()).unwrap();
            segment_spectrogram(&s, SEGMENT_FRAMES, SEGMENT_FRAMES)
        })
        .collect();
    mean_band_power(&segs, bins)
}

#[test]
fn noise_band_energy_gap() {
    let p = SynthProfile::band_noise();
    let bins = band_bins((2000.0, 3000.0), &p.stft, p.sample_rate);
    assert_eq!(bins, 64..97);
    let mut gaps = Vec::new();
    for seed in [1, 2, 3] {
        let c = synth_corpus(&p, seed).unwrap();
        let clean = domain_band_power(&c.clean, bins.clone());
        let noisy = domain_band_power(&c.noisy, bins.clone());
        gaps.push(noisy - clean);
        assert!(noisy > clean, "seed {seed}: noisy {noisy} clean {clean}");
    }
    // each domain's band power is dominated by the noise at 0 dB, so the gap
    // is of the same order across seeds
    let (lo, hi) = gaps.iter().fold((f64::INFINITY, 0.0f64), |(l, h), g| (l.min(*g), h.max(*g)));
    assert!(lo > 0.5 * hi, "gaps {:?}", gaps);
}

#[test]
fn disabled_noise_leaves_domains_alike() {
    let mut p = SynthProfile::band_noise();
    p.noise = None;
    p.utterances = 24;
    let bins = band_bins((2000.0, 3000.0), &p.stft, p.sample_rate);
    let c = synth_corpus(&p, 4).unwrap();
    let clean = domain_band_power(&c.clean, bins.clone());
    let noisy = domain_band_power(&c.noisy, bins);
    // same generator, independent draws: equal up to sampling spread
    assert!((clean - noisy).abs() < 0.35 * clean.max(noisy), "{clean} vs {noisy}");
}

proptest! {
    #[test]
    fn segments_tile_a_prefix(frames in 0usize..700, width in 1usize..200) {
        let spec = Spectrogram {
            mag: (0..3 * frames).map(|i| i as f64).collect(),
            bins: 3,
            frames,
            config: StftConfig::default(),
        };
        let segs = segment_spectrogram(&spec, width, width);
        prop_assert_eq!(segs.len(), if frames >= width { (frames - width) / width + 1 } else { 0 });
        for (i, s) in segs.iter().enumerate() {
            prop_assert_eq!(s.start, i * width);
            for k in 0..3 {
                prop_assert_eq!(&s.data[k * width..(k + 1) * width], &spec.mag[k * frames + s.start..k * frames + s.start + width]);
            }
        }
    }

    #[test]
    fn normalize_round_trip(lo in -1.0f64..2.0, span in 0.1f64..5.0, t in 0.0f64..=1.0) {
        let stats = NormStats::new(lo.max(0.0), lo.max(0.0) + span).unwrap();
        let x = (stats.lo + t * (stats.hi - stats.lo)).exp_m1();
        let seg_val = stats.normalize_value(x);
        prop_assert!((-1.0..=1.0).contains(&seg_val));
        let back = stats.denormalize_value(seg_val);
        prop_assert!((back - x).abs() <= 1e-6 * x.abs().max(1e-9));
    }
}
