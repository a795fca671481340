//! Log-mel features, SpecAugment and channel averaging.

mod melt;

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synth::MultiChannelAudio;

pub use melt::{read_melt, write_melt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_mels: usize,
    pub f_min_hz: f64,
    pub f_max_hz: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            win_length: 1024,
            hop_length: 320,
            n_mels: 64,
            f_min_hz: 0.0,
            f_max_hz: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("mel config: {msg}")));
        if self.win_length < 2 || self.hop_length == 0 || self.n_mels == 0 {
            return bad("window, hop and mel count must be positive");
        }
        if !(self.f_min_hz >= 0.0 && self.f_min_hz < self.f_max_hz && self.f_max_hz <= self.sample_rate_hz as f64 / 2.0) {
            return bad("need 0 <= f_min < f_max <= fs/2");
        }
        if self.log_floor <= 0.0 {
            return bad("log floor must be positive");
        }
        Ok(())
    }

    /// Frames produced for `n` samples (no centering).
    pub fn frame_count(&self, n: usize) -> usize {
        if n < self.win_length {
            0
        } else {
            1 + (n - self.win_length) / self.hop_length
        }
    }
}

/// Log-mel features laid out `[channel][band][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelTensor {
    pub channels: usize,
    pub mel_bands: usize,
    pub frames: usize,
    pub data: Vec<f32>,
    pub sample_rate_hz: u32,
    pub hop_samples: usize,
}

impl MelTensor {
    pub fn new(channels: usize, mel_bands: usize, frames: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || mel_bands == 0 || frames == 0 {
            return Err(Error::InvalidArgument("mel tensor dimensions must be positive".into()));
        }
        if data.len() != channels * mel_bands * frames {
            return Err(Error::shape("mel tensor", &[channels, mel_bands, frames], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mel tensor".into()));
        }
        let d = MelConfig::default();
        Ok(Self {
            channels,
            mel_bands,
            frames,
            data,
            sample_rate_hz: d.sample_rate_hz,
            hop_samples: d.hop_length,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.mel_bands, self.frames]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.mel_bands * self.frames;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, f: usize, t: usize) -> f32 {
        self.data[(c * self.mel_bands + f) * self.frames + t]
    }

    /// Keeps only channel `c`.
    pub fn select_channel(&self, c: usize) -> Result<MelTensor> {
        if c >= self.channels {
            return Err(Error::InvalidArgument(format!("channel {c} out of range for {} channels", self.channels)));
        }
        Ok(MelTensor {
            channels: 1,
            data: self.channel(c).to_vec(),
            ..self.clone()
        })
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies of the triangular filters.
pub fn mel_centers_hz(cfg: &MelConfig) -> Vec<f64> {
    mel_edges_hz(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges_hz(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min_hz), hz_to_mel(cfg.f_max_hz));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filter weights `[n_mels][n_fft/2 + 1]`, peak 1, unnormalized.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<Vec<f64>> {
    let bins = cfg.win_length / 2 + 1;
    let edges = mel_edges_hz(cfg);
    let bin_hz = cfg.sample_rate_hz as f64 / cfg.win_length as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - l) / (c - l);
                    let down = (r - f) / (r - c);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Reusable STFT plan, window and filterbank.
pub struct MelExtractor {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Per filter: first bin and weights of its nonzero support.
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.win_length;
        let fft = FftPlanner::new().plan_fft_forward(n);
        // Periodic Hann.
        let window = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();
        let filters = mel_filterbank(&cfg)
            .into_iter()
            .map(|w| {
                let first = w.iter().position(|&v| v > 0.0).unwrap_or(0);
                let last = w.iter().rposition(|&v| v > 0.0).map_or(first, |p| p + 1);
                (first, w[first..last].to_vec())
            })
            .collect();
        Ok(Self {
            cfg,
            fft,
            window,
            filters,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn extract(&self, audio: &MultiChannelAudio) -> Result<MelTensor> {
        if audio.sample_rate_hz != self.cfg.sample_rate_hz {
            return Err(Error::SampleRateMismatch(audio.sample_rate_hz, self.cfg.sample_rate_hz));
        }
        let frames = self.cfg.frame_count(audio.len());
        if frames == 0 {
            return Err(Error::InvalidArgument(format!(
                "audio of {} samples is shorter than one {}-sample window",
                audio.len(),
                self.cfg.win_length
            )));
        }
        let f = self.cfg.n_mels;
        let mut data = vec![0f32; audio.channel_count() * f * frames];
        for (c, ch) in audio.channels.iter().enumerate() {
            self.extract_channel(ch, frames, &mut data[c * f * frames..(c + 1) * f * frames]);
        }
        let mut mel = MelTensor::new(audio.channel_count(), f, frames, data)?;
        mel.sample_rate_hz = self.cfg.sample_rate_hz;
        mel.hop_samples = self.cfg.hop_length;
        Ok(mel)
    }

    fn extract_channel(&self, x: &[f32], frames: usize, out: &mut [f32]) {
        let n = self.cfg.win_length;
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; n / 2 + 1];
        for t in 0..frames {
            let start = t * self.cfg.hop_length;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(x[start + i] as f64 * self.window[i], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            for (m, (first, w)) in self.filters.iter().enumerate() {
                let e: f64 = w.iter().zip(&power[*first..]).map(|(a, b)| a * b).sum();
                out[m * frames + t] = (e + self.cfg.log_floor).ln() as f32;
            }
        }
    }
}

/// One-shot log-mel extraction; build a [`MelExtractor`] to reuse plans.
pub fn mel_spectrogram(audio: &MultiChannelAudio, cfg: &MelConfig) -> Result<MelTensor> {
    MelExtractor::new(cfg.clone())?.extract(audio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub time_masks: usize,
    pub time_width: usize,
    pub freq_masks: usize,
    pub freq_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self {
            time_masks: 4,
            time_width: 64,
            freq_masks: 2,
            freq_width: 8,
        }
    }
}

/// Half-open mask ranges drawn for one augmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub time: Vec<(usize, usize)>,
    pub freq: Vec<(usize, usize)>,
}

fn strip(rng: &mut rng::Rng, len: usize, width: usize) -> (usize, usize) {
    let start = rng.random_range(0..=len.saturating_sub(width));
    (start, (start + width).min(len))
}

impl MaskPlan {
    pub fn draw(frames: usize, bands: usize, cfg: &SpecAugmentConfig, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let time = (0..cfg.time_masks).map(|_| strip(&mut r, frames, cfg.time_width)).collect();
        let freq = (0..cfg.freq_masks).map(|_| strip(&mut r, bands, cfg.freq_width)).collect();
        Self { time, freq }
    }
}

/// Masks time and frequency strips with each channel's mean, at the same
/// positions in every channel.
pub fn spec_augment(mel: &MelTensor, cfg: &SpecAugmentConfig, seed: u64) -> MelTensor {
    let plan = MaskPlan::draw(mel.frames, mel.mel_bands, cfg, seed);
    apply_masks(mel, &plan)
}

pub fn apply_masks(mel: &MelTensor, plan: &MaskPlan) -> MelTensor {
    let mut out = mel.clone();
    let (f, t) = (mel.mel_bands, mel.frames);
    let mut masked = vec![false; f * t];
    for &(a, b) in &plan.time {
        for band in 0..f {
            masked[band * t + a..band * t + b].fill(true);
        }
    }
    for &(a, b) in &plan.freq {
        masked[a * t..b * t].fill(true);
    }
    for c in 0..mel.channels {
        let ch = mel.channel(c);
        let mean = (ch.iter().map(|&v| v as f64).sum::<f64>() / ch.len() as f64) as f32;
        let dst = &mut out.data[c * f * t..(c + 1) * f * t];
        for (d, &m) in dst.iter_mut().zip(&masked) {
            if m {
                *d = mean;
            }
        }
    }
    out
}

/// Mean over channels of a log-mel tensor; the result has one channel.
pub fn average_channels(mel: &MelTensor) -> MelTensor {
    let n = mel.mel_bands * mel.frames;
    let mut mean = mel.channel(0).to_vec();
    // Running mean keeps identical channels bit-identical.
    for c in 1..mel.channels {
        let k = c as f32 + 1.0;
        for (m, &x) in mean.iter_mut().zip(mel.channel(c)) {
            *m += (x - *m) / k;
        }
    }
    debug_assert_eq!(mean.len(), n);
    MelTensor {
        channels: 1,
        data: mean,
        ..mel.clone()
    }
}
