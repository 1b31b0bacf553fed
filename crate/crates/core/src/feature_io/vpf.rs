//! VPF: a little-endian container of labelled `T × D` float32 clips.
//!
//! ```text
//! 0..4    magic "VPFT"
//! 4..8    version (u32) = 1
//! 8..12   record count (u32)
//! 12..16  D (u32)
//! per record:
//!         T (u32), label (u32), clip_id byte length (u32),
//!         clip_id UTF-8 bytes, T·D float32 values, time-major
//! ```
//!
//! Values are widened to f64 on read and narrowed to f32 on write, so a
//! file read and written back reproduces the same bytes.

use std::fs;
use std::path::Path;

use super::{Dataset, FeatureSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VPFT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// Encodes `ds` into VPF bytes.
pub fn write_vpf_to(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(
        HEADER_LEN
            + ds.clips
                .iter()
                .map(|c| 12 + c.clip_id.len() + 4 * c.frames.numel())
                .sum::<usize>(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(ds.clips.len(), "record count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(ds.dim, "D")?.to_le_bytes());
    for (i, clip) in ds.clips.iter().enumerate() {
        if clip.frames.rank() != 2 || clip.dim() != ds.dim {
            return Err(Error::Inconsistent(format!(
                "clip {i} has shape {:?}, header D is {}",
                clip.frames.shape(),
                ds.dim
            )));
        }
        out.extend_from_slice(&to_u32(clip.len(), "T")?.to_le_bytes());
        out.extend_from_slice(&to_u32(clip.label, "label")?.to_le_bytes());
        out.extend_from_slice(&to_u32(clip.clip_id.len(), "clip_id length")?.to_le_bytes());
        out.extend_from_slice(clip.clip_id.as_bytes());
        for &v in clip.frames.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Format(format!("{what} {x} exceeds u32")))
}

/// Writes `ds` to `path`.
pub fn write_vpf(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = write_vpf_to(ds)?;
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt {
                offset: self.pos as u64,
                reason: format!("truncated {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes VPF bytes.
pub fn read_vpf_from(buf: &[u8]) -> Result<Dataset> {
    if buf.len() < 4 {
        return Err(Error::Format("missing VPFT magic".into()));
    }
    if &buf[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:02x?}", &buf[..4])));
    }
    let mut cur = Cursor { buf, pos: 4 };
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32("record count")? as usize;
    let dim = cur.u32("D")? as usize;

    let mut clips = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let start = cur.pos as u64;
        let t = cur.u32("T")? as usize;
        let label = cur.u32("label")? as usize;
        let id_len = cur.u32("clip_id length")? as usize;
        let id = cur.take(id_len, "clip_id")?;
        let clip_id = std::str::from_utf8(id)
            .map_err(|e| Error::Corrupt {
                offset: start,
                reason: format!("clip_id is not UTF-8: {e}"),
            })?
            .to_string();
        let n = t
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt {
                offset: start,
                reason: format!("T={t} × D={dim} overflows"),
            })?;
        let raw = cur.take(n, "frame values")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Corrupt {
                offset: start,
                reason: format!("non-finite value in clip `{clip_id}`"),
            });
        }
        clips.push(FeatureSequence {
            frames: Tensor::new(&[t, dim], data)?,
            label,
            clip_id,
        });
    }
    if cur.pos != buf.len() {
        return Err(Error::Inconsistent(format!(
            "{} trailing bytes after {count} records; records disagree with header D={dim}",
            buf.len() - cur.pos
        )));
    }

    let num_classes = clips.iter().map(|c| c.label + 1).max().unwrap_or(0);
    let mut seen = vec![false; num_classes];
    for c in &clips {
        seen[c.label] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Inconsistent(format!(
            "class {missing} has no clips; labels must cover 0..{num_classes}"
        )));
    }
    Dataset::new(clips, num_classes, dim)
}

/// Reads a VPF file.
pub fn read_vpf(path: &Path) -> Result<Dataset> {
    read_vpf_from(&fs::read(path)?)
}
