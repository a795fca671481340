//! "MELT" feature cache files.

use std::fs;
use std::path::Path;

use super::MelTensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MELT";
const VERSION: u32 = 1;

pub fn write_melt(path: impl AsRef<Path>, mel: &MelTensor) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(20 + mel.data.len() * 4);
    bytes.extend_from_slice(MAGIC);
    for v in [VERSION, mel.channels as u32, mel.mel_bands as u32, mel.frames as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for v in &mel.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_melt(path: impl AsRef<Path>) -> Result<MelTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(Error::format("MELT", format!("{}: bad header", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[4 + 4 * i], bytes[5 + 4 * i], bytes[6 + 4 * i], bytes[7 + 4 * i]]) as usize;
    if word(0) != VERSION as usize {
        return Err(Error::format("MELT", format!("unsupported version {}", word(0))));
    }
    let (c, f, t) = (word(1), word(2), word(3));
    let payload = &bytes[20..];
    if payload.len() != c * f * t * 4 {
        return Err(Error::format("MELT", format!("{}: payload size does not match {c}x{f}x{t}", path.display())));
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    MelTensor::new(c, f, t, data)
}
