//! WAV reading/writing and sample-rate conversion.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::MultiChannelAudio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WavFormat {
    Pcm16,
    Pcm24,
    Float32,
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<MultiChannelAudio> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    let n_ch = usize::from(spec.channels);
    if n_ch == 0 {
        return Err(Error::format("wav", format!("{} has no channels", path.display())));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader.into_samples::<f32>().collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f32;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (fmt, bits) => {
            return Err(Error::format("wav", format!("unsupported {fmt:?} {bits}-bit in {}", path.display())));
        }
    };
    let frames = interleaved.len() / n_ch;
    let mut channels = vec![Vec::with_capacity(frames); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (ch, &v) in channels.iter_mut().zip(frame) {
            ch.push(v);
        }
    }
    MultiChannelAudio::new(spec.sample_rate, channels)
}

pub fn write_wav(path: impl AsRef<Path>, audio: &MultiChannelAudio, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let channels = u16::try_from(audio.channel_count())
        .map_err(|_| Error::InvalidArgument("too many channels for WAV".into()))?;
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, hound::SampleFormat::Int),
        WavFormat::Pcm24 => (24, hound::SampleFormat::Int),
        WavFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels,
        sample_rate: audio.sample_rate_hz,
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for i in 0..audio.len() {
        for ch in &audio.channels {
            let v = ch[i];
            match format {
                WavFormat::Float32 => writer.write_sample(v)?,
                WavFormat::Pcm16 => writer.write_sample((v.clamp(-1.0, 1.0) * 32767.0).round() as i16)?,
                WavFormat::Pcm24 => writer.write_sample((v.clamp(-1.0, 1.0) * 8_388_607.0).round() as i32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}

/// Reads a WAV file and converts it to `target_rate_hz`.
pub fn read_wav_at(path: impl AsRef<Path>, target_rate_hz: u32) -> Result<MultiChannelAudio> {
    let audio = read_wav(path)?;
    resample(&audio, target_rate_hz)
}

const RESAMPLE_HALF_TAPS: usize = 32;
const MAX_TABLE_PHASES: usize = 4096;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rational polyphase resampler with a Hann-windowed sinc low-pass.
pub fn resample(audio: &MultiChannelAudio, target_rate_hz: u32) -> Result<MultiChannelAudio> {
    if target_rate_hz == 0 || audio.sample_rate_hz == 0 {
        return Err(Error::InvalidArgument("sample rates must be positive".into()));
    }
    if target_rate_hz == audio.sample_rate_hz {
        return Ok(audio.clone());
    }
    let g = gcd(u64::from(audio.sample_rate_hz), u64::from(target_rate_hz));
    let up = u64::from(target_rate_hz) / g;
    let down = u64::from(audio.sample_rate_hz) / g;
    // Cutoff relative to the input Nyquist; widen the kernel when decimating.
    let ratio = (up as f64 / down as f64).min(1.0);
    let half = (RESAMPLE_HALF_TAPS as f64 / ratio).ceil() as i64;
    let kernel = |tau: f64| -> f64 {
        if tau.abs() >= half as f64 {
            return 0.0;
        }
        let w = 0.5 * (1.0 + (PI * tau / half as f64).cos());
        let x = ratio * tau;
        let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
        ratio * sinc * w
    };
    let table: Option<Vec<Vec<f64>>> = (up as usize <= MAX_TABLE_PHASES).then(|| {
        (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                (-half + 1..=half).map(|k| kernel(k as f64 - frac)).collect()
            })
            .collect()
    });
    let n_in = audio.len() as u64;
    let n_out = (n_in * up).div_ceil(down) as usize;
    let channels = audio
        .channels
        .iter()
        .map(|x| {
            (0..n_out)
                .map(|n| {
                    let num = n as u64 * down;
                    let base = (num / up) as i64;
                    let phase = (num % up) as usize;
                    let mut acc = 0.0f64;
                    for (j, k) in (-half + 1..=half).enumerate() {
                        let idx = base + k;
                        if idx < 0 || idx >= n_in as i64 {
                            continue;
                        }
                        let h = match &table {
                            Some(t) => t[phase][j],
                            None => kernel(k as f64 - phase as f64 / up as f64),
                        };
                        acc += f64::from(x[idx as usize]) * h;
                    }
                    acc as f32
                })
                .collect()
        })
        .collect();
    MultiChannelAudio::new(target_rate_hz, channels)
}
