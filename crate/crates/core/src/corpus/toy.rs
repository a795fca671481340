//! Synthetic audiovisual corpus whose label needs both modalities: the audio
//! carries one bit (tone frequency) and the video another (motion direction).

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{build_split, write_clip, write_manifest, EmotionLabel, ManifestEntry, Split, UtteranceManifest, VideoClip};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed};
use crate::synth::{mean_power, noise_gain, MultiChannelAudio};
use crate::wav::{write_wav, WavFormat};

/// Independent per-microphone noise added on top of the shared signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyNoiseChannels {
    pub channels: usize,
    /// Shared-signal to per-channel-noise ratio.
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub n_per_class: usize,
    pub actors: u32,
    pub sample_rate_hz: u32,
    pub duration_s: f64,
    /// Tone frequency for audio bit 0 and 1.
    pub tone_hz: [f64; 2],
    pub tone_amplitude: f64,
    /// Standard deviation of the shared white background noise.
    pub noise_amplitude: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub square: usize,
    /// Horizontal displacement per frame.
    pub step_px: usize,
    /// Standard deviation of per-pixel noise, in 8-bit levels.
    pub pixel_noise: f64,
    pub noise_channels: Option<ToyNoiseChannels>,
    pub split_ratios: (f64, f64, f64),
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            n_per_class: 200,
            actors: 24,
            sample_rate_hz: 16_000,
            duration_s: 0.7,
            tone_hz: [400.0, 800.0],
            tone_amplitude: 0.1,
            noise_amplitude: 0.1,
            frames: 10,
            height: 20,
            width: 20,
            square: 5,
            step_px: 1,
            pixel_noise: 8.0,
            noise_channels: None,
            split_ratios: (0.8, 0.1, 0.1),
        }
    }
}

impl ToyCorpusConfig {
    /// Variant without any noise, for which both cues are exact.
    pub fn noiseless(mut self) -> Self {
        self.noise_amplitude = 0.0;
        self.pixel_noise = 0.0;
        self.noise_channels = None;
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("toy corpus: {msg}")));
        if self.n_per_class < 4 {
            return bad(format!("n_per_class must be at least 4, got {}", self.n_per_class));
        }
        if self.frames < super::clip::MIN_FRAMES {
            return bad(format!("need at least {} frames", super::clip::MIN_FRAMES));
        }
        let travel = self.step_px * (self.frames - 1);
        if self.square == 0 || self.square > self.height || self.square + travel > self.width {
            return bad("square does not fit its trajectory".into());
        }
        if self.duration_s <= 0.0 || self.tone_hz.iter().any(|&f| f <= 0.0 || f >= self.sample_rate_hz as f64 / 2.0) {
            return bad("bad duration or tone frequency".into());
        }
        if let Some(n) = &self.noise_channels {
            if n.channels == 0 {
                return bad("noise_channels.channels must be positive".into());
            }
        }
        Ok(())
    }
}

/// Class index encoding the two cues.
pub fn toy_label(audio_bit: usize, video_bit: usize) -> EmotionLabel {
    EmotionLabel::ALL[2 * audio_bit + video_bit]
}

/// Writes WAVs, PCLP clips and `manifest.jsonl` under `out_dir`.
pub fn generate_toy_corpus(out_dir: impl AsRef<Path>, cfg: &ToyCorpusConfig, seed: u64) -> Result<UtteranceManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    for sub in ["audio", "video", "multi"] {
        if sub == "multi" && cfg.noise_channels.is_none() {
            continue;
        }
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(4 * cfg.n_per_class);
    for i in 0..cfg.n_per_class {
        for class in 0..4 {
            let (audio_bit, video_bit) = (class / 2, class % 2);
            let id = format!("toy-{class}-{i:05}");
            let item_seed = derive_seed(seed, (i * 4 + class) as u64);
            let actor_id = 1 + (i as u32 % cfg.actors);

            let clean = toy_audio(cfg, audio_bit, derive_seed(item_seed, 0));
            let clean_rel = PathBuf::from("audio").join(format!("{id}.wav"));
            write_wav(out_dir.join(&clean_rel), &MultiChannelAudio::new(cfg.sample_rate_hz, vec![clean.clone()])?, WavFormat::Float32)?;

            let multichannel_audio_path = match &cfg.noise_channels {
                Some(nc) => {
                    let multi = noisy_channels(&clean, nc, derive_seed(item_seed, 1));
                    let rel = PathBuf::from("multi").join(format!("{id}.wav"));
                    write_wav(out_dir.join(&rel), &MultiChannelAudio::new(cfg.sample_rate_hz, multi)?, WavFormat::Float32)?;
                    Some(rel)
                }
                None => None,
            };

            let clip = toy_clip(cfg, video_bit, derive_seed(item_seed, 2))?;
            let video_rel = PathBuf::from("video").join(format!("{id}.pclp"));
            write_clip(out_dir.join(&video_rel), &clip)?;

            entries.push(ManifestEntry {
                utterance_id: id,
                actor_id,
                label: toy_label(audio_bit, video_bit),
                clean_audio_path: clean_rel,
                multichannel_audio_path,
                video_clip_path: Some(video_rel),
                rir_provenance: None,
                split: Split::Train,
            });
        }
    }
    let mut manifest = UtteranceManifest {
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    // Split over the actors that actually received clips.
    let actors = manifest.actors();
    manifest.apply_split(&build_split(&actors, cfg.split_ratios, derive_seed(seed, u64::MAX))?)?;
    write_manifest(out_dir.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}

fn toy_audio(cfg: &ToyCorpusConfig, bit: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::rng(seed);
    let n = (cfg.duration_s * cfg.sample_rate_hz as f64).round() as usize;
    let phase = r.random_range(0.0..2.0 * PI);
    let w = 2.0 * PI * cfg.tone_hz[bit] / cfg.sample_rate_hz as f64;
    let noise = Normal::new(0.0, cfg.noise_amplitude.max(0.0)).expect("finite std");
    (0..n)
        .map(|t| {
            let tone = cfg.tone_amplitude * (w * t as f64 + phase).sin();
            let bg = if cfg.noise_amplitude > 0.0 { noise.sample(&mut r) } else { 0.0 };
            (tone + bg) as f32
        })
        .collect()
}

fn noisy_channels(clean: &[f32], nc: &ToyNoiseChannels, seed: u64) -> Vec<Vec<f32>> {
    let p_signal = mean_power(clean);
    let gain = noise_gain(p_signal, 1.0, nc.snr_db);
    (0..nc.channels)
        .map(|c| {
            let mut r = rng::rng(derive_seed(seed, c as u64));
            clean
                .iter()
                .map(|&s| {
                    let n: f64 = rand_distr::StandardNormal.sample(&mut r);
                    (s as f64 + gain * n) as f32
                })
                .collect()
        })
        .collect()
}

/// A bright square sliding right (`bit = 1`) or left (`bit = 0`).
fn toy_clip(cfg: &ToyCorpusConfig, bit: usize, seed: u64) -> Result<VideoClip> {
    let mut r = rng::rng(seed);
    let travel = cfg.step_px * (cfg.frames - 1);
    let x_lo = r.random_range(0..=cfg.width - cfg.square - travel);
    let y0 = r.random_range(0..=cfg.height - cfg.square);
    let noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).expect("finite std");
    let mut data = Vec::with_capacity(cfg.frames * cfg.height * cfg.width * 3);
    for f in 0..cfg.frames {
        let offset = if bit == 1 { f * cfg.step_px } else { travel - f * cfg.step_px };
        let x0 = x_lo + offset;
        for y in 0..cfg.height {
            for x in 0..cfg.width {
                let inside = (y0..y0 + cfg.square).contains(&y) && (x0..x0 + cfg.square).contains(&x);
                let base = if inside { 220.0 } else { 30.0 };
                for _ in 0..3 {
                    let n = if cfg.pixel_noise > 0.0 { noise.sample(&mut r) } else { 0.0 };
                    data.push((base + n).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    VideoClip::new(cfg.frames, cfg.height, cfg.width, data)
}
