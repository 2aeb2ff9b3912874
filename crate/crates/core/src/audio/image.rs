//! Binary PGM (P5) export of spectrogram-shaped data.

use std::fs;
use std::path::Path;

use super::stft::Spectrogram;
use crate::error::{Error, Result};

/// Row-major `rows × cols` values in `[-1, 1]`, mapped linearly to 0..=255.
/// Row 0 is the first frequency bin.
pub fn encode_pgm(data: &[f64], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(
        data[..rows * cols]
            .iter()
            .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8),
    );
    out
}

pub fn write_pgm(path: impl AsRef<Path>, data: &[f64], rows: usize, cols: usize) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(data, rows, cols)).map_err(|e| Error::io(path, e))
}

/// Parse a P5 image back into `(rows, cols, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(Error::Format("not a binary PGM".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("PGM header: {e}")));
    let (cols, rows) = (parse(&fields[1])?, parse(&fields[2])?);
    let pixels = bytes.get(at + 1..at + 1 + rows * cols).ok_or_else(|| Error::Format("truncated PGM data".into()))?;
    Ok((rows, cols, pixels.to_vec()))
}

/// Log-compressed, min-max scaled view of a whole spectrogram.
pub fn spectrogram_display(spec: &Spectrogram) -> Vec<f64> {
    let logs: Vec<f64> = spec.mag.iter().map(|v| v.ln_1p()).collect();
    let lo = logs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![-1.0; logs.len()];
    }
    logs.iter().map(|v| 2.0 * (v - lo) / (hi - lo) - 1.0).collect()
}
