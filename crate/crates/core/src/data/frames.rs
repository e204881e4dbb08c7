//! Binary frame files: magic `SRNF`, version, `T`, `D` (all little-endian
//! `u32`), then `T * D` row-major `f32` values.

use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::lattice::FrameSequence;

pub const FRAMES_MAGIC: &[u8; 4] = b"SRNF";
pub const FRAMES_VERSION: u32 = 1;
const HEADER_BYTES: usize = 16;

pub fn write_frames(path: &Path, frames: &FrameSequence) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::format(path, "cannot write a frame file with T = 0"));
    }
    let t = u32::try_from(frames.len()).map_err(|_| Error::format(path, "T exceeds u32"))?;
    let d = u32::try_from(frames.dim()).map_err(|_| Error::format(path, "D exceeds u32"))?;
    let mut bytes = Vec::with_capacity(HEADER_BYTES + 4 * frames.data().len());
    bytes.extend_from_slice(FRAMES_MAGIC);
    bytes.extend_from_slice(&FRAMES_VERSION.to_le_bytes());
    bytes.extend_from_slice(&t.to_le_bytes());
    bytes.extend_from_slice(&d.to_le_bytes());
    for &v in frames.data() {
        let v = v as f32;
        if !v.is_finite() {
            return Err(Error::format(path, "frame value does not fit in f32"));
        }
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

fn u32_at(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes"))
}

pub fn read_frames(path: &Path) -> Result<FrameSequence> {
    let bytes = read_file(path)?;
    if bytes.len() < HEADER_BYTES {
        return Err(Error::format(
            path,
            format!("truncated header: expected {HEADER_BYTES} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != FRAMES_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}", &bytes[..4])));
    }
    let version = u32_at(&bytes, 4);
    if version != FRAMES_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let t = u32_at(&bytes, 8) as usize;
    let d = u32_at(&bytes, 12) as usize;
    if t == 0 || d == 0 {
        return Err(Error::format(path, format!("empty frame matrix {t}x{d}")));
    }
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_BYTES))
        .ok_or_else(|| Error::format(path, "frame matrix size overflows"))?;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {t}x{d} frames, found {}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(t * d);
    for (i, chunk) in bytes[HEADER_BYTES..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::format(
                path,
                format!("non-finite value at frame {}, dim {}", i / d, i % d),
            ));
        }
        values.push(v as f64);
    }
    FrameSequence::new(values, t, d)
}
