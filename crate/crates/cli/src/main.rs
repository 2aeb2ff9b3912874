use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use noisim_core::audio::{
    read_wav, spectrogram_display, stft_magnitude, synth_corpus, write_corpus, write_pgm, CorpusManifest, StftConfig,
    SynthProfile,
};
use noisim_core::dualpath::{eval_examples, evaluate_noisy_path, simulated_pairs, train_dualpath, AcousticState, DualPathConfig};
use noisim_core::gradsuite::{full_suite, suite_table};
use noisim_core::trainer::{simulate, train, SimulateOptions, TrainConfig, TrainState};
use noisim_core::Error;

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "noisim", version, about = "Clean-to-noisy spectrogram simulation and dual-path training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic clean/noisy corpus with manifests
    SynthData {
        /// Synthesis profile: band-noise or smoke
        #[arg(long, value_name = "P")]
        profile: String,
        /// Corpus seed
        #[arg(long, value_name = "S")]
        seed: u64,
        /// Output directory for clean/, noisy/, clean.tsv and noisy.tsv
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the clean-to-noisy generator; writes checkpoints and metrics.csv
    TrainSimugan {
        /// JSON training config; manifest paths resolve against its directory
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Output directory for checkpoints, metrics.csv and the resolved config
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Translate clean segments into simulated noisy ones
    Simulate {
        /// Generator checkpoint
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Manifest of clean audio
        #[arg(long, value_name = "MANIFEST")]
        clean: PathBuf,
        /// Output directory for .seg, .pgm and simulated.tsv
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Also write Griffin-Lim reconstructions as WAV
        #[arg(long)]
        wav: bool,
    },
    /// Run the finite-difference gradient suite; exits 3 if any check fails
    Gradcheck {
        /// Seed of the random inputs and probed coordinates
        #[arg(long, value_name = "S", default_value_t = 7)]
        seed: u64,
    },
    /// Train an acoustic model on clean segments paired with their simulations
    TrainDualpath {
        /// JSON dual-path config
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Generator checkpoint used to simulate the noisy path
        #[arg(long, value_name = "FILE")]
        simugan_ckpt: PathBuf,
        /// Output directory for model.sgan and history.csv
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Frame error rate of an acoustic model on noisy test audio
    EvalDualpath {
        /// Acoustic model checkpoint
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Manifest of labeled noisy test audio
        #[arg(long, value_name = "MANIFEST")]
        test: PathBuf,
    },
    /// Export the log-magnitude spectrogram of a WAV file as a PGM image
    Plot {
        /// Input audio
        #[arg(long = "in", value_name = "WAV")]
        input: PathBuf,
        /// Output image, one row per frequency bin
        #[arg(long, value_name = "PGM")]
        out: PathBuf,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidProfile(_) | Error::Sampling(_) => USAGE,
            Error::NonFinite(_) | Error::Diff(_) => NUMERIC,
            _ => DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: DATA,
        message: format!("{}: {e}", dir.display()),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure {
        code: DATA,
        message: format!("{}: {e}", path.display()),
    })
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::SynthData { profile, seed, out } => {
            let p = SynthProfile::by_name(&profile).ok_or_else(|| Failure {
                code: USAGE,
                message: format!("unknown profile {profile:?}; expected band-noise or smoke"),
            })?;
            info!("synth-data profile={profile} seed={seed} out={}", out.display());
            let corpus = synth_corpus(&p, seed)?;
            let (clean, noisy) = write_corpus(&corpus, &out)?;
            println!("wrote {} clean and {} noisy utterances to {}", clean.len(), noisy.len(), out.display());
        }
        Command::TrainSimugan { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            info!("train-simugan seed={} config={}", cfg.seed, cfg.to_json());
            create_dir(&out)?;
            write_text(&out.join("config.json"), &cfg.to_json())?;
            let state = train(&cfg, &out)?;
            println!("trained {} steps; final checkpoint {}", state.step, out.join("final.sgan").display());
        }
        Command::Simulate { ckpt, clean, out, wav } => {
            let state = TrainState::load(&ckpt)?;
            let manifest = CorpusManifest::load(&clean)?;
            info!("simulate ckpt={} step={} segments from {}", ckpt.display(), state.step, clean.display());
            let opts = SimulateOptions {
                wav,
                ..SimulateOptions::default()
            };
            let m = simulate(&state, &manifest, &out, &opts)?;
            println!("wrote {} simulated segments to {}", m.len(), out.display());
        }
        Command::Gradcheck { seed } => {
            info!("gradcheck seed={seed}");
            let rows = full_suite(seed)?;
            print!("{}", suite_table(&rows));
            let failed = rows.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(Failure {
                    code: NUMERIC,
                    message: format!("{failed} of {} gradient checks failed", rows.len()),
                });
            }
        }
        Command::TrainDualpath { config, simugan_ckpt, out } => {
            let cfg = DualPathConfig::load(&config)?;
            info!("train-dualpath seed={} config={}", cfg.seed, cfg.to_json());
            let gan = TrainState::load(&simugan_ckpt)?;
            let clean = CorpusManifest::load(&cfg.clean_manifest)?;
            let pairs = simulated_pairs(&gan, &clean)?;
            let state = train_dualpath(&pairs, &cfg, gan.stats)?;
            create_dir(&out)?;
            state.save(out.join("model.sgan"))?;
            let mut history = String::from("step,loss\n");
            for (i, l) in state.history.iter().enumerate() {
                history.push_str(&format!("{},{l}\n", i + 1));
            }
            write_text(&out.join("history.csv"), &history)?;
            println!(
                "trained {} steps on {} pairs; final loss {:.6}",
                state.step,
                pairs.len(),
                state.history.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::EvalDualpath { model, test } => {
            let state = AcousticState::load(&model)?;
            let manifest = CorpusManifest::load(&test)?;
            let examples = eval_examples(&manifest, &state.stats, &StftConfig::default())?;
            if examples.is_empty() {
                return Err(Failure::from(Error::EmptyCorpus(format!("{} has no labeled segments", test.display()))));
            }
            info!("eval-dualpath model={} segments={}", model.display(), examples.len());
            let fer = evaluate_noisy_path(&state.model, &examples)?;
            println!("FER {fer:.6}");
        }
        Command::Plot { input, out } => {
            let clip = read_wav(&input)?;
            let spec = stft_magnitude(&clip, &StftConfig::default())?;
            write_pgm(&out, &spectrogram_display(&spec), spec.bins, spec.frames)?;
            info!("plot {} -> {} ({}x{})", input.display(), out.display(), spec.bins, spec.frames);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("NOISIM_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
