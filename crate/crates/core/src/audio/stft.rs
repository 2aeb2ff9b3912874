use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::wav::AudioClip;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    Hann,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftConfig {
    /// 256-point frames give 129 bins; hop 128 makes a 128-frame segment
    /// about 2.1 s at 8 kHz.
    fn default() -> Self {
        Self {
            fft_size: 256,
            hop: 128,
            window: Window::Hann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() || self.fft_size < 2 {
            return Err(Error::Config(format!("fft_size {} is not a power of two", self.fft_size)));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::Config(format!("hop {} outside (0, fft_size]", self.hop)));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            (len - self.fft_size) / self.hop + 1
        }
    }

    /// Periodic window coefficients.
    pub fn window_coeffs(&self) -> Vec<f64> {
        let n = self.fft_size as f64;
        match self.window {
            Window::Hann => (0..self.fft_size)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
                .collect(),
        }
    }
}

/// Magnitude spectrogram, `[bins × frames]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub mag: Vec<f64>,
    pub bins: usize,
    pub frames: usize,
    pub config: StftConfig,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.mag[bin * self.frames + frame]
    }
}

/// Complex STFT, `[bins × frames]` row-major.
pub(crate) struct ComplexStft {
    pub data: Vec<Complex<f64>>,
    pub bins: usize,
    pub frames: usize,
}

pub(crate) fn stft_complex(samples: &[f64], cfg: &StftConfig, planner: &mut FftPlanner<f64>) -> ComplexStft {
    let n = cfg.fft_size;
    let bins = cfg.bins();
    let frames = cfg.frames_for(samples.len());
    let win = cfg.window_coeffs();
    let fft = planner.plan_fft_forward(n);
    let mut data = vec![Complex::new(0.0, 0.0); bins * frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for t in 0..frames {
        let frame = &samples[t * cfg.hop..t * cfg.hop + n];
        for ((b, s), w) in buf.iter_mut().zip(frame).zip(&win) {
            *b = Complex::new(s * w, 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            data[k * frames + t] = buf[k];
        }
    }
    ComplexStft { data, bins, frames }
}

pub fn stft_magnitude(clip: &AudioClip, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    if clip.len() < cfg.fft_size {
        return Err(Error::InsufficientLength {
            len: clip.len(),
            needed: cfg.fft_size,
        });
    }
    let mut planner = FftPlanner::new();
    let c = stft_complex(&clip.samples, cfg, &mut planner);
    Ok(Spectrogram {
        mag: c.data.iter().map(|z| z.norm()).collect(),
        bins: c.bins,
        frames: c.frames,
        config: *cfg,
    })
}
