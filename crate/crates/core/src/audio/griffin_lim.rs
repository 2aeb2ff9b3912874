//! Phase retrieval by alternating projections between the set of signals and
//! the set of spectrograms with the target magnitude.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::stft::{stft_complex, Spectrogram};
use super::wav::AudioClip;
use crate::error::{Error, Result};

/// Least-squares inverse STFT (weighted overlap-add).
fn istft(spec: &[Complex<f64>], bins: usize, frames: usize, fft_size: usize, hop: usize, win: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let len = (frames - 1) * hop + fft_size;
    let ifft = planner.plan_fft_inverse(fft_size);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    for t in 0..frames {
        for k in 0..bins {
            buf[k] = spec[k * frames + t];
        }
        // Hermitian fill for a real signal.
        for k in bins..fft_size {
            buf[k] = buf[fft_size - k].conj();
        }
        buf[0].im = 0.0;
        if fft_size % 2 == 0 {
            buf[fft_size / 2].im = 0.0;
        }
        ifft.process(&mut buf);
        let base = t * hop;
        for i in 0..fft_size {
            out[base + i] += win[i] * buf[i].re / fft_size as f64;
            norm[base + i] += win[i] * win[i];
        }
    }
    for (o, n) in out.iter_mut().zip(&norm) {
        *o = if *n > 1e-12 { *o / n } else { 0.0 };
    }
    out
}

fn residual(a: &[Complex<f64>], target: &[f64]) -> f64 {
    a.iter()
        .zip(target)
        .map(|(z, m)| (z.norm() - m).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Griffin-Lim reconstruction together with the magnitude residual
/// `‖|STFT(x_k)| − mag‖_F` after every iteration `k`.
pub fn griffin_lim_traced(mag: &Spectrogram, iterations: usize, sample_rate: u32) -> Result<(AudioClip, Vec<f64>)> {
    if iterations == 0 {
        return Err(Error::Config("griffin_lim needs at least one iteration".into()));
    }
    let cfg = mag.config;
    cfg.validate()?;
    if mag.frames == 0 {
        return Err(Error::InsufficientLength { len: 0, needed: 1 });
    }
    let win = cfg.window_coeffs();
    let mut planner = FftPlanner::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6c1f);
    let mut spec: Vec<Complex<f64>> = mag
        .mag
        .iter()
        .map(|&m| Complex::from_polar(m, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)))
        .collect();
    let mut trace = Vec::with_capacity(iterations);
    let mut signal = Vec::new();
    for _ in 0..iterations {
        signal = istft(&spec, mag.bins, mag.frames, cfg.fft_size, cfg.hop, &win, &mut planner);
        let est = stft_complex(&signal, &cfg, &mut planner);
        trace.push(residual(&est.data, &mag.mag));
        for ((s, e), m) in spec.iter_mut().zip(&est.data).zip(&mag.mag) {
            let n = e.norm();
            *s = if n > 0.0 { e * (m / n) } else { Complex::new(*m, 0.0) };
        }
    }
    let peak = signal.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 1.0 {
        signal.iter_mut().for_each(|v| *v /= peak);
    }
    Ok((AudioClip::new(signal, sample_rate)?, trace))
}

pub fn griffin_lim(mag: &Spectrogram, iterations: usize, sample_rate: u32) -> Result<AudioClip> {
    griffin_lim_traced(mag, iterations, sample_rate).map(|(clip, _)| clip)
}
