//! Binary container for one normalized feature segment: magic `SSEG`, u32
//! bins, u32 frames, f64 `lo`, f64 `hi`, then f32 values row by row.

use std::fs;
use std::path::Path;

use super::features::{FeatureSegment, NormStats, FEATURE_BINS, SEGMENT_FRAMES};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SSEG";
const HEADER: usize = 4 + 4 + 4 + 8 + 8;

pub fn encode_segment(seg: &FeatureSegment) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + seg.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(FEATURE_BINS as u32).to_le_bytes());
    out.extend_from_slice(&(SEGMENT_FRAMES as u32).to_le_bytes());
    out.extend_from_slice(&seg.stats.lo.to_le_bytes());
    out.extend_from_slice(&seg.stats.hi.to_le_bytes());
    for &v in &seg.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_segment(bytes: &[u8]) -> Result<FeatureSegment> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a segment file".into()));
    }
    let bins = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if (bins, frames) != (FEATURE_BINS, SEGMENT_FRAMES) {
        return Err(Error::Format(format!("segment is {bins}x{frames}, expected {FEATURE_BINS}x{SEGMENT_FRAMES}")));
    }
    let lo = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let hi = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
    let body = &bytes[HEADER..];
    if body.len() != bins * frames * 4 {
        return Err(Error::Format(format!("segment body holds {} bytes, expected {}", body.len(), bins * frames * 4)));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureSegment::new(data, NormStats::new(lo, hi)?)
}

pub fn write_segment(path: impl AsRef<Path>, seg: &FeatureSegment) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_segment(seg)).map_err(|e| Error::io(path, e))
}

pub fn read_segment(path: impl AsRef<Path>) -> Result<FeatureSegment> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_segment(&bytes)
}
