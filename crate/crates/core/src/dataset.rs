//! Corpus-wide stages: simulated room families, reverberant multi-channel
//! synthesis and log-mel caching. Every item draws its randomness from a seed
//! derived from its own name, so results do not depend on the job count.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::acoustics::{sample_room_with, simulate_rir_with, RirSet, RoomConstraints, RoomSpec, SimulationOptions};
use crate::corpus::{write_manifest, ManifestEntry, UtteranceManifest};
use crate::error::{Error, Result};
use crate::frontend::{write_melt, MelConfig, MelExtractor};
use crate::par::par_map;
use crate::rng::{derive_seed, derive_seed_str};
use crate::synth::{convolve_rir, mix_at_snr};
use crate::train::{load_audio, AudioSource};
use crate::wav::{read_wav_at, write_wav, WavFormat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub mics: usize,
    pub snr_db: f64,
    /// AR(1) coefficient of the additive noise.
    pub noise_coeff: f64,
    pub rooms: RoomConstraints,
    pub simulation: SimulationOptions,
    pub format: WavFormat,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            mics: 3,
            snr_db: 20.0,
            noise_coeff: 0.9,
            rooms: RoomConstraints::default(),
            simulation: SimulationOptions::default(),
            format: WavFormat::Float32,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::Config { key: format!("synthesis.{key}"), msg: msg.into() });
        if self.mics == 0 {
            return bad("mics", "must be at least 1");
        }
        if !self.snr_db.is_finite() {
            return bad("snr_db", "must be finite");
        }
        if !(self.noise_coeff.abs() < 1.0) {
            return bad("noise_coeff", "must lie in (-1, 1)");
        }
        Ok(())
    }
}

/// Room `index` of the family generated by `seed`.
pub fn simulate_room(seed: u64, index: usize, cfg: &SynthesisConfig) -> Result<RirSet> {
    let room = sample_room_with(derive_seed(seed, index as u64), cfg.mics, &cfg.rooms)?;
    let mut set = simulate_rir_with(&room, &cfg.simulation)?;
    set.name = format!("room{index:03}");
    Ok(set)
}

pub fn simulate_rooms(seed: u64, count: usize, cfg: &SynthesisConfig, jobs: usize) -> Result<Vec<RirSet>> {
    cfg.validate()?;
    let idx: Vec<usize> = (0..count).collect();
    par_map(jobs, &idx, |_, &i| simulate_room(seed, i, cfg))
}

#[derive(Serialize)]
struct RirSidecarOut<'a> {
    name: &'a str,
    t60_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    room: Option<&'a RoomSpec>,
}

/// Writes `<dir>/<name>.wav` (float32, one channel per microphone) and a JSON
/// sidecar readable by the RIR ingester.
pub fn write_rir_set(dir: &Path, set: &RirSet) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let wav_path = dir.join(format!("{}.wav", set.name));
    let audio = crate::synth::MultiChannelAudio::new(set.sample_rate_hz, set.rirs.clone())?;
    write_wav(&wav_path, &audio, WavFormat::Float32)?;
    let side = RirSidecarOut {
        name: &set.name,
        t60_s: set.t60_s,
        room: set.room.as_ref(),
    };
    let json_path = wav_path.with_extension("json");
    fs::write(&json_path, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(wav_path)
}

fn absolute(manifest: &UtteranceManifest, p: &Path) -> Result<PathBuf> {
    let r = manifest.resolve(p);
    std::path::absolute(&r).map_err(|e| Error::io(&r, e))
}

/// Convolves every clean utterance with its own simulated room, adds noise at
/// the configured SNR and writes `<out_dir>/audio/<id>.wav`. Reverberant audio
/// is trimmed to the clean length. Returns the updated manifest, also written
/// to `<out_dir>/manifest.jsonl`.
pub fn synthesize_dataset(manifest: &UtteranceManifest, out_dir: &Path, cfg: &SynthesisConfig, seed: u64, jobs: usize) -> Result<UtteranceManifest> {
    cfg.validate()?;
    let audio_dir = out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
    let rate = cfg.simulation.sample_rate_hz;
    let entries = par_map(jobs, &manifest.entries, |_, e| {
        let room_seed = derive_seed_str(seed, &format!("room/{}", e.utterance_id));
        let room = sample_room_with(room_seed, cfg.mics, &cfg.rooms)?;
        let rirs = simulate_rir_with(&room, &cfg.simulation)?;
        let clean = read_wav_at(manifest.resolve(&e.clean_audio_path), rate)?.channel(0)?;
        let n = clean.samples.len();
        let mut rev = convolve_rir(&clean, &rirs)?;
        for ch in &mut rev.channels {
            ch.truncate(n);
        }
        let mixed = mix_at_snr(&rev, cfg.snr_db, cfg.noise_coeff, derive_seed_str(seed, &format!("noise/{}", e.utterance_id)))?;
        let rel = PathBuf::from("audio").join(format!("{}.wav", e.utterance_id));
        write_wav(out_dir.join(&rel), &mixed, cfg.format)?;
        Ok(ManifestEntry {
            clean_audio_path: absolute(manifest, &e.clean_audio_path)?,
            video_clip_path: e.video_clip_path.as_deref().map(|p| absolute(manifest, p)).transpose()?,
            multichannel_audio_path: Some(rel),
            rir_provenance: Some(format!("synthetic:{room_seed}")),
            ..e.clone()
        })
    })?;
    let out = UtteranceManifest {
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    write_manifest(out_dir.join("manifest.jsonl"), &out)?;
    Ok(out)
}

/// Computes log-mels of every entry from `source` and writes them to
/// `<out_dir>/<id>.melt`. Returns the number of files written.
pub fn extract_features(manifest: &UtteranceManifest, source: AudioSource, mel: &MelConfig, out_dir: &Path, jobs: usize) -> Result<usize> {
    if matches!(source, AudioSource::Cached(_)) {
        return Err(Error::InvalidArgument("features cannot be extracted from cached features".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let extractor = MelExtractor::new(mel.clone())?;
    let written = par_map(jobs, &manifest.entries, |_, e| {
        let m = extractor.extract(&load_audio(manifest, e, source, mel.sample_rate_hz)?)?;
        write_melt(out_dir.join(format!("{}.melt", e.utterance_id)), &m)
    })?;
    Ok(written.len())
}
