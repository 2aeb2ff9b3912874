//! Cutting spectrograms into fixed-size segments and mapping them to `[-1, 1]`.

use serde::{Deserialize, Serialize};

use super::stft::Spectrogram;
use crate::error::{Error, Result};

pub const FEATURE_BINS: usize = 129;
pub const SEGMENT_FRAMES: usize = 128;

/// Raw `[bins × width]` magnitude block.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSegment {
    pub data: Vec<f64>,
    pub bins: usize,
    pub frames: usize,
    /// First source frame covered.
    pub start: usize,
}

/// Non-overlapping `width`-frame windows stepping by `hop`; the tail that does
/// not fill a whole window is dropped.
pub fn segment_spectrogram(spec: &Spectrogram, width: usize, hop: usize) -> Vec<RawSegment> {
    if width == 0 || hop == 0 || spec.frames < width {
        return Vec::new();
    }
    let count = (spec.frames - width) / hop + 1;
    (0..count)
        .map(|s| {
            let start = s * hop;
            let mut data = Vec::with_capacity(spec.bins * width);
            for k in 0..spec.bins {
                let row = &spec.mag[k * spec.frames..(k + 1) * spec.frames];
                data.extend_from_slice(&row[start..start + width]);
            }
            RawSegment {
                data,
                bins: spec.bins,
                frames: width,
                start,
            }
        })
        .collect()
}

/// Log-domain percentile bounds used for the affine map onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub lo: f64,
    pub hi: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

impl NormStats {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::DegenerateStats { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    /// 1st/99th percentiles of `ln(1 + x)` over every entry of the segments.
    pub fn from_segments<'a>(segments: impl IntoIterator<Item = &'a RawSegment>) -> Result<Self> {
        let mut values: Vec<f64> = segments
            .into_iter()
            .flat_map(|s| s.data.iter().map(|v| v.ln_1p()))
            .collect();
        if values.is_empty() {
            return Err(Error::DegenerateStats { lo: 0.0, hi: 0.0 });
        }
        values.sort_by(f64::total_cmp);
        Self::new(percentile(&values, 0.01), percentile(&values, 0.99))
    }

    pub fn normalize_value(&self, raw: f64) -> f64 {
        (2.0 * (raw.max(0.0).ln_1p() - self.lo) / (self.hi - self.lo) - 1.0).clamp(-1.0, 1.0)
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        ((v + 1.0) * 0.5 * (self.hi - self.lo) + self.lo).exp_m1().max(0.0)
    }
}

/// One normalized `129 × 128` feature block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSegment {
    pub data: Vec<f64>,
    pub stats: NormStats,
}

impl FeatureSegment {
    pub fn new(data: Vec<f64>, stats: NormStats) -> Result<Self> {
        if data.len() != FEATURE_BINS * SEGMENT_FRAMES {
            return Err(Error::Format(format!(
                "feature segment holds {} values, expected {}x{}",
                data.len(),
                FEATURE_BINS,
                SEGMENT_FRAMES
            )));
        }
        if data.iter().any(|v| !v.is_finite() || v.abs() > 1.0 + 1e-6) {
            return Err(Error::Format("feature value outside [-1, 1]".into()));
        }
        Ok(Self { data, stats })
    }

    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.data[bin * SEGMENT_FRAMES + frame]
    }
}

pub fn normalize_segment(raw: &RawSegment, stats: &NormStats) -> Result<FeatureSegment> {
    FeatureSegment::new(raw.data.iter().map(|&v| stats.normalize_value(v)).collect(), *stats)
}

pub fn denormalize_segment(seg: &FeatureSegment) -> RawSegment {
    RawSegment {
        data: seg.data.iter().map(|&v| seg.stats.denormalize_value(v)).collect(),
        bins: FEATURE_BINS,
        frames: SEGMENT_FRAMES,
        start: 0,
    }
}
