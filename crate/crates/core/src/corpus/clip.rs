//! "PCLP" packed RGB clips.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PCLP";
const VERSION: u32 = 1;
pub const DEFAULT_FRAME_RATE_HZ: f64 = 30.0;
pub const MIN_FRAMES: usize = 8;

/// RGB frames stored `[frame][row][col][channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
    /// Not stored in the file; readers assume [`DEFAULT_FRAME_RATE_HZ`].
    pub frame_rate_hz: f64,
}

impl VideoClip {
    pub fn new(frame_count: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("clip frames must be non-empty".into()));
        }
        if frame_count < MIN_FRAMES {
            return Err(Error::InvalidArgument(format!("clip has {frame_count} frames, need at least {MIN_FRAMES}")));
        }
        if data.len() != frame_count * height * width * 3 {
            return Err(Error::shape("video clip", &[frame_count, height, width, 3], &[data.len()]));
        }
        Ok(Self {
            frame_count,
            height,
            width,
            data,
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
        })
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn pixel(&self, frame: usize, y: usize, x: usize) -> [u8; 3] {
        let i = ((frame * self.height + y) * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub fn write_clip(path: impl AsRef<Path>, clip: &VideoClip) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(20 + clip.data.len());
    bytes.extend_from_slice(MAGIC);
    for v in [VERSION, clip.frame_count as u32, clip.height as u32, clip.width as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend_from_slice(&clip.data);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_clip(path: impl AsRef<Path>) -> Result<VideoClip> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(Error::format("PCLP", format!("{}: bad header", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes([bytes[4 + 4 * i], bytes[5 + 4 * i], bytes[6 + 4 * i], bytes[7 + 4 * i]]) as usize;
    if word(0) != VERSION as usize {
        return Err(Error::format("PCLP", format!("unsupported version {}", word(0))));
    }
    let (n, h, w) = (word(1), word(2), word(3));
    if bytes.len() - 20 != n * h * w * 3 {
        return Err(Error::format("PCLP", format!("{}: payload does not match {n}x{h}x{w}x3", path.display())));
    }
    VideoClip::new(n, h, w, bytes[20..].to_vec())
}
