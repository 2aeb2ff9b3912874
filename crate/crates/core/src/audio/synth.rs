//! Deterministic tone-sequence corpora standing in for real clean and noisy
//! speech. Clean and noisy utterances are drawn independently, so the two
//! domains are unpaired.

use std::f64::consts::PI;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::features::RawSegment;
use super::manifest::{CorpusManifest, Domain, ManifestEntry};
use super::stft::StftConfig;
use super::wav::{write_wav, AudioClip};
use crate::error::{Error, Result};

/// Additive noise confined to a frequency band, at a fixed SNR relative to
/// each utterance's own signal power.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseRecipe {
    pub band_hz: (f64, f64),
    pub snr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthProfile {
    pub sample_rate: u32,
    /// One frequency per class; class `k` is a tone at `tone_hz[k]`.
    pub tone_hz: Vec<f64>,
    /// Utterances per domain.
    pub utterances: usize,
    pub utterance_secs: f64,
    /// Tone units last this many STFT hops.
    pub unit_frames: usize,
    pub amplitude: (f64, f64),
    /// White floor present in both domains.
    pub floor_amplitude: f64,
    /// `None` disables the noisy recipe (infinitely high SNR).
    pub noise: Option<NoiseRecipe>,
    pub stft: StftConfig,
}

impl SynthProfile {
    /// Four tone classes, two of them inside a 2-3 kHz noise band at 0 dB SNR.
    pub fn band_noise() -> Self {
        Self {
            sample_rate: 8000,
            tone_hz: vec![500.0, 1250.0, 2250.0, 2750.0],
            utterances: 16,
            utterance_secs: 2.1,
            unit_frames: 8,
            amplitude: (0.1, 0.3),
            floor_amplitude: 1e-3,
            noise: Some(NoiseRecipe {
                band_hz: (2000.0, 3000.0),
                snr_db: 0.0,
            }),
            stft: StftConfig::default(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "band-noise" => Some(Self::band_noise()),
            "smoke" => Some(Self {
                utterances: 2,
                ..Self::band_noise()
            }),
            _ => None,
        }
    }

    pub fn classes(&self) -> usize {
        self.tone_hz.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tone_hz.len() < 2 {
            return Err(Error::InvalidProfile(format!(
                "need at least 2 tone classes, got {}",
                self.tone_hz.len()
            )));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let mut sorted = self.tone_hz.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) || sorted.iter().any(|&f| !(f > 0.0 && f < nyquist)) {
            return Err(Error::InvalidProfile("tone frequencies must be distinct and inside (0, Nyquist)".into()));
        }
        if self.sample_rate == 0 || self.unit_frames == 0 || !(self.utterance_secs > 0.0) {
            return Err(Error::InvalidProfile("sample rate, unit length and duration must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.amplitude.0) || !(self.amplitude.0..=1.0).contains(&self.amplitude.1) {
            return Err(Error::InvalidProfile("amplitude range must lie in [0, 1]".into()));
        }
        if let Some(n) = &self.noise {
            if !(n.band_hz.0 >= 0.0 && n.band_hz.0 < n.band_hz.1 && n.band_hz.1 <= nyquist) {
                return Err(Error::InvalidProfile("noise band must be ordered and below Nyquist".into()));
            }
            if !n.snr_db.is_finite() {
                return Err(Error::InvalidProfile("noise SNR must be finite; omit the recipe to disable".into()));
            }
        }
        self.stft.validate()
    }

    fn samples_per_utterance(&self) -> usize {
        (self.utterance_secs * self.sample_rate as f64).round() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub name: String,
    pub clip: AudioClip,
    /// Class id of every STFT frame.
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub profile: SynthProfile,
    pub clean: Vec<SynthUtterance>,
    pub noisy: Vec<SynthUtterance>,
}

fn utterance_rng(seed: u64, domain: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 32) | index as u64);
    rng
}

/// Random tone sequence; returns the signal and the class of each unit.
fn tone_sequence(p: &SynthProfile, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let len = p.samples_per_utterance();
    let unit = p.unit_frames * p.stft.hop;
    let units = len.div_ceil(unit);
    let sr = p.sample_rate as f64;
    let mut out = vec![0.0; len];
    let mut classes = Vec::with_capacity(units);
    for u in 0..units {
        let class = rng.random_range(0..p.tone_hz.len());
        let amp = rng.random_range(p.amplitude.0..=p.amplitude.1);
        let phase = rng.random_range(0.0..2.0 * PI);
        let w = 2.0 * PI * p.tone_hz[class] / sr;
        for (i, s) in out.iter_mut().enumerate().skip(u * unit).take(unit) {
            *s = amp * (w * i as f64 + phase).sin();
        }
        classes.push(class);
    }
    for s in out.iter_mut() {
        *s += p.floor_amplitude * rng.sample::<f64, _>(StandardNormal);
    }
    (out, classes)
}

fn frame_labels(p: &SynthProfile, classes: &[usize], len: usize) -> Vec<usize> {
    let unit = p.unit_frames * p.stft.hop;
    (0..p.stft.frames_for(len))
        .map(|t| classes[((t * p.stft.hop + p.stft.fft_size / 2) / unit).min(classes.len() - 1)])
        .collect()
}

fn band_noise(len: usize, recipe: &NoiseRecipe, sr: f64, power: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if len == 0 || power <= 0.0 {
        return vec![0.0; len];
    }
    let mut buf: Vec<Complex<f64>> = (0..len)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(len).process(&mut buf);
    for (k, z) in buf.iter_mut().enumerate() {
        let bin = k.min(len - k);
        let hz = bin as f64 * sr / len as f64;
        if hz < recipe.band_hz.0 || hz > recipe.band_hz.1 {
            *z = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let raw: Vec<f64> = buf.iter().map(|z| z.re).collect();
    let raw_power = raw.iter().map(|v| v * v).sum::<f64>() / len as f64;
    if raw_power <= 0.0 {
        return vec![0.0; len];
    }
    let target = power / 10f64.powf(recipe.snr_db / 10.0);
    let gain = (target / raw_power).sqrt();
    raw.into_iter().map(|v| v * gain).collect()
}

fn make_utterance(p: &SynthProfile, seed: u64, domain: Domain, index: usize) -> Result<SynthUtterance> {
    let tag = match domain {
        Domain::Clean => 0,
        Domain::Noisy => 1,
        Domain::Simulated => 2,
    };
    let mut rng = utterance_rng(seed, tag, index);
    let (mut signal, classes) = tone_sequence(p, &mut rng);
    if domain == Domain::Noisy {
        if let Some(recipe) = &p.noise {
            let power = signal.iter().map(|v| v * v).sum::<f64>() / signal.len().max(1) as f64;
            let noise = band_noise(signal.len(), recipe, p.sample_rate as f64, power, &mut rng);
            signal.iter_mut().zip(noise).for_each(|(s, n)| *s += n);
        }
    }
    signal.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
    let labels = frame_labels(p, &classes, signal.len());
    Ok(SynthUtterance {
        name: format!("{domain}_{index:04}"),
        clip: AudioClip::new(signal, p.sample_rate)?,
        labels,
    })
}

/// `clean` with the profile's noise recipe added: a paired noisy version of
/// the same utterance, for experiments that need clean/noisy pairs without a
/// trained simulator.
pub fn noisy_counterpart(profile: &SynthProfile, clean: &SynthUtterance, seed: u64, index: usize) -> Result<SynthUtterance> {
    let mut rng = utterance_rng(seed, 3, index);
    let mut signal = clean.clip.samples.clone();
    if let Some(recipe) = &profile.noise {
        let power = signal.iter().map(|v| v * v).sum::<f64>() / signal.len().max(1) as f64;
        let noise = band_noise(signal.len(), recipe, profile.sample_rate as f64, power, &mut rng);
        signal.iter_mut().zip(noise).for_each(|(s, n)| *s = (*s + n).clamp(-1.0, 1.0));
    }
    Ok(SynthUtterance {
        name: format!("paired_{index:04}"),
        clip: AudioClip::new(signal, clean.clip.sample_rate)?,
        labels: clean.labels.clone(),
    })
}

/// Clean and noisy corpora, a pure function of `(profile, seed)`.
pub fn synth_corpus(profile: &SynthProfile, seed: u64) -> Result<SynthCorpus> {
    profile.validate()?;
    let clean = (0..profile.utterances)
        .map(|i| make_utterance(profile, seed, Domain::Clean, i))
        .collect::<Result<Vec<_>>>()?;
    let noisy = (0..profile.utterances)
        .map(|i| make_utterance(profile, seed, Domain::Noisy, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthCorpus {
        profile: profile.clone(),
        clean,
        noisy,
    })
}

/// Writes `clean/*.wav`, `noisy/*.wav`, `clean.tsv` and `noisy.tsv` under `dir`
/// and returns both manifests with paths resolved against `dir`.
pub fn write_corpus(corpus: &SynthCorpus, dir: impl AsRef<Path>) -> Result<(CorpusManifest, CorpusManifest)> {
    let dir = dir.as_ref();
    let mut manifests = Vec::new();
    for (domain, utts) in [(Domain::Clean, &corpus.clean), (Domain::Noisy, &corpus.noisy)] {
        let sub = dir.join(domain.to_string());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut entries = Vec::new();
        for u in utts {
            let rel = PathBuf::from(domain.to_string()).join(format!("{}.wav", u.name));
            write_wav(dir.join(&rel), &u.clip)?;
            entries.push(ManifestEntry {
                path: rel,
                domain,
                duration: u.clip.duration_secs(),
                labels: Some(u.labels.clone()),
            });
        }
        let m = CorpusManifest::new(entries)?;
        let path = dir.join(format!("{domain}.tsv"));
        m.save(&path)?;
        manifests.push(CorpusManifest::load(&path)?);
    }
    let noisy = manifests.pop().unwrap();
    let clean = manifests.pop().unwrap();
    Ok((clean, noisy))
}

/// STFT bins whose center frequency lies inside `band_hz`.
pub fn band_bins(band_hz: (f64, f64), cfg: &StftConfig, sample_rate: u32) -> Range<usize> {
    let hz_per_bin = sample_rate as f64 / cfg.fft_size as f64;
    let lo = (band_hz.0 / hz_per_bin).ceil() as usize;
    let hi = ((band_hz.1 / hz_per_bin).floor() as usize + 1).min(cfg.bins());
    lo..hi.max(lo)
}

/// Mean power `|X|²` over the given bins of every raw segment.
pub fn mean_band_power(segments: &[RawSegment], bins: Range<usize>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for s in segments {
        for k in bins.clone() {
            for v in &s.data[k * s.frames..(k + 1) * s.frames] {
                total += v * v;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
