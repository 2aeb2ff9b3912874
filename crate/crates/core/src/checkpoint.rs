//! The `SGAN` container shared by Simu-GAN and acoustic-model checkpoints.
//!
//! Layout, all integers little-endian:
//! magic `SGAN`, u32 version, u64 step, u64-length-prefixed UTF-8 JSON
//! snapshot, u32 tensor count, then per tensor a u64-length-prefixed name,
//! u32 rank, u64 dims and f32 data; finally the CRC32 of everything before it.

use std::fs;
use std::path::Path;

use noisim_diffcore::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGAN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub step: u64,
    pub snapshot: String,
    pub tensors: Vec<(String, Tensor)>,
}

/// Round `t` through f32, the precision stored on disk.
pub fn quantize(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
}

pub fn encode(c: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&c.step.to_le_bytes());
    out.extend_from_slice(&(c.snapshot.len() as u64).to_le_bytes());
    out.extend_from_slice(c.snapshot.as_bytes());
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for (name, t) in &c.tensors {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Checkpoint {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        if n > (self.bytes.len() - self.pos) as u64 {
            return self.fail(format!("{what} length {n} runs past the end of the file"));
        }
        Ok(n as usize)
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        let start = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Checkpoint {
            offset: start as u64,
            message: format!("{what} is not UTF-8"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 4 + 4 + 8 + 4 {
        return Err(Error::Checkpoint {
            offset: bytes.len() as u64,
            message: "file too short for a checkpoint header".into(),
        });
    }
    let body_len = bytes.len() - 4;
    let mut r = Reader {
        bytes: &bytes[..body_len],
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint {
            offset: 0,
            message: "bad magic, not a checkpoint".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint {
            offset: 4,
            message: format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        });
    }
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_len]) != stored {
        return Err(Error::Checkpoint {
            offset: body_len as u64,
            message: "checksum mismatch, file is corrupt or truncated".into(),
        });
    }
    let step = r.u64("step")?;
    let snapshot = r.text("snapshot")?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let name = r.text("tensor name")?;
        let rank = r.u32("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("tensor dim")?;
            numel = numel.saturating_mul(d);
            dims.push(d as usize);
        }
        if numel.saturating_mul(4) > (r.bytes.len() - r.pos) as u64 {
            return r.fail(format!("tensor {name} data runs past the end of the file"));
        }
        let raw = r.take(numel as usize * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint {
            offset: r.pos as u64,
            message: format!("tensor {name}: {e}"),
        })?;
        tensors.push((name, t));
    }
    if r.pos != body_len {
        return r.fail("trailing bytes after the last tensor");
    }
    Ok(Container { step, snapshot, tensors })
}

pub fn save(c: &Container, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(c)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
