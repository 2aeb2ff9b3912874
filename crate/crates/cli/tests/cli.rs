use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn noisim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_noisim"))
        .args(args)
        .env("NOISIM_LOG", "error")
        .output()
        .unwrap()
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(format!("{name}.txt"));
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

const SUBCOMMANDS: [&str; 7] = [
    "synth-data",
    "train-simugan",
    "simulate",
    "gradcheck",
    "train-dualpath",
    "eval-dualpath",
    "plot",
];

#[test]
fn help_matches_golden_files() {
    let out = noisim(&["--help"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden("noisim"));
    for sub in SUBCOMMANDS {
        let out = noisim(&[sub, "--help"]);
        assert!(out.status.success(), "{sub}");
        assert_eq!(String::from_utf8(out.stdout).unwrap(), golden(sub), "{sub}");
    }
}

#[test]
fn help_documents_every_flag() {
    let flags: [(&str, &[&str]); 7] = [
        ("synth-data", &["--profile", "--seed", "--out"]),
        ("train-simugan", &["--config", "--out"]),
        ("simulate", &["--ckpt", "--clean", "--out", "--wav"]),
        ("gradcheck", &["--seed"]),
        ("train-dualpath", &["--config", "--simugan-ckpt", "--out"]),
        ("eval-dualpath", &["--model", "--test"]),
        ("plot", &["--in", "--out"]),
    ];
    for (sub, fl) in flags {
        let text = golden(sub);
        for f in fl {
            assert!(text.contains(f), "{sub} help lacks {f}");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(noisim(&["simulate", "--bogus"]).status.code(), Some(1));
    assert_eq!(noisim(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(noisim(&["plot", "--in", "x.wav"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(noisim(&["synth-data", "--profile", "nope", "--seed", "1", "--out", out]).status.code(), Some(1));
}

#[test]
fn simulate_without_checkpoint_exits_two_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("absent.sgan");
    let out = noisim(&[
        "simulate",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--clean",
        "clean.tsv",
        "--out",
        dir.path().join("sim").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(ckpt.to_str().unwrap()));
}

/// 1 s of a 1 kHz tone at 8 kHz, as 16-bit mono PCM.
fn tone_wav(path: &Path, hz: f64) {
    let rate = 8000u32;
    let samples: Vec<i16> = (0..rate)
        .map(|n| (0.5 * (2.0 * std::f64::consts::PI * hz * n as f64 / rate as f64).sin() * 32767.0) as i16)
        .collect();
    let mut b = Vec::new();
    b.extend_from_slice(b"RIFF");
    b.extend_from_slice(&(36 + 2 * samples.len() as u32).to_le_bytes());
    b.extend_from_slice(b"WAVEfmt ");
    b.extend_from_slice(&16u32.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&rate.to_le_bytes());
    b.extend_from_slice(&(2 * rate).to_le_bytes());
    b.extend_from_slice(&2u16.to_le_bytes());
    b.extend_from_slice(&16u16.to_le_bytes());
    b.extend_from_slice(b"data");
    b.extend_from_slice(&(2 * samples.len() as u32).to_le_bytes());
    for s in samples {
        b.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, b).unwrap();
}

/// Bin of the largest direct-DFT magnitude over one 256-sample frame.
fn dft_peak_bin(hz: f64) -> usize {
    let x: Vec<f64> = (0..256).map(|n| (2.0 * std::f64::consts::PI * hz * n as f64 / 8000.0).sin()).collect();
    (0..129)
        .max_by(|&a, &b| {
            let mag = |k: usize| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in x.iter().enumerate() {
                    let ph = -2.0 * std::f64::consts::PI * (k * n) as f64 / 256.0;
                    re += v * ph.cos();
                    im += v * ph.sin();
                }
                re.hypot(im)
            };
            mag(a).total_cmp(&mag(b))
        })
        .unwrap()
}

#[test]
fn plot_of_a_tone_is_brightest_at_its_bin() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("tone.wav");
    let pgm = dir.path().join("tone.pgm");
    tone_wav(&wav, 1000.0);
    let out = noisim(&["plot", "--in", wav.to_str().unwrap(), "--out", pgm.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (rows, cols, px) = noisim_core::audio::decode_pgm(&fs::read(&pgm).unwrap()).unwrap();
    assert_eq!(rows, 129);
    let row_sum = |r: usize| px[r * cols..(r + 1) * cols].iter().map(|&p| p as u64).sum::<u64>();
    let brightest = (0..rows).max_by_key(|&r| row_sum(r)).unwrap();
    assert_eq!(brightest, dft_peak_bin(1000.0));
}

#[test]
fn synth_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        let out = noisim(&["synth-data", "--profile", "smoke", "--seed", "4", "--out", d.to_str().unwrap()]);
        assert!(out.status.success());
    }
    for f in ["clean.tsv", "noisy.tsv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let m = noisim_core::audio::CorpusManifest::load(a.join("clean.tsv")).unwrap();
    for e in &m.entries {
        let rel = e.path.strip_prefix(&a).unwrap();
        assert_eq!(fs::read(&e.path).unwrap(), fs::read(b.join(rel)).unwrap());
    }
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    assert!(noisim(&["synth-data", "--profile", "smoke", "--seed", "1", "--out", &p("data")]).status.success());
    assert!(noisim(&["synth-data", "--profile", "smoke", "--seed", "2", "--out", &p("test")]).status.success());
    let cfg = noisim_core::trainer::TrainConfig {
        arch: noisim_core::models::ArchPlan::tiny(),
        steps: 2,
        patches_per_layer: 16,
        checkpoint_interval: 0,
        clean_manifest: "data/clean.tsv".into(),
        noisy_manifest: "data/noisy.tsv".into(),
        ..Default::default()
    };
    fs::write(p("gan.json"), cfg.to_json()).unwrap();
    for run in ["run_a", "run_b"] {
        let out = noisim(&["train-simugan", "--config", &p("gan.json"), "--out", &p(run)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(fs::read(p("run_a/final.sgan")).unwrap(), fs::read(p("run_b/final.sgan")).unwrap());

    let sim = noisim(&[
        "simulate",
        "--ckpt",
        &p("run_a/final.sgan"),
        "--clean",
        &p("data/clean.tsv"),
        "--out",
        &p("sim"),
    ]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    assert!(Path::new(&p("sim/simulated.tsv")).exists());

    let dp = noisim_core::dualpath::DualPathConfig {
        plan: noisim_core::dualpath::AcousticPlan::tiny(),
        steps: 3,
        clean_manifest: "data/clean.tsv".into(),
        ..Default::default()
    };
    fs::write(p("dp.json"), dp.to_json()).unwrap();
    let out = noisim(&["train-dualpath", "--config", &p("dp.json"), "--simugan-ckpt", &p("run_a/final.sgan"), "--out", &p("am")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(p("am/history.csv")).unwrap().lines().count(), 4);

    let out = noisim(&["eval-dualpath", "--model", &p("am/model.sgan"), "--test", &p("test/noisy.tsv")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let fer: f64 = text.trim().strip_prefix("FER ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&fer));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, "{\"steps\": 0}").unwrap();
    let out = noisim(&["train-simugan", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_prints_a_passing_table() {
    let out = noisim(&["gradcheck", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("check"));
    let mut rows = 0;
    for line in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err: f64 = fields[fields.len() - 3].parse().unwrap();
        assert!(err <= 1e-4, "{line}");
        assert_eq!(*fields.last().unwrap(), "ok");
        rows += 1;
    }
    assert!(rows >= 28);
}
