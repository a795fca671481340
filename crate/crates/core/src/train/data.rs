use std::path::Path;

use crate::acoustics::RirSet;
use crate::audio_encoder::prepare_input;
use crate::corpus::{read_clip, ManifestEntry, Split, UtteranceManifest, VideoClip};
use crate::error::{Error, Result};
use crate::frontend::{read_melt, spec_augment, MelConfig, MelExtractor, MelTensor};
use crate::model::{ModelConfig, ModelInput};
use crate::nn::Tensor;
use crate::par::par_map;
use crate::rng::derive_seed_str;
use crate::synth::{convolve_rir, MultiChannelAudio};
use crate::video::{sample_and_augment, to_channel_major};
use crate::wav::read_wav_at;

use super::TrainConfig;

/// One utterance with its decoded inputs.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub mel: Option<MelTensor>,
    pub clip: Option<VideoClip>,
}

/// Which audio an utterance contributes.
#[derive(Debug, Clone, Copy)]
pub enum AudioSource<'a> {
    Clean,
    Multichannel,
    /// Clean audio convolved with a room's RIRs, trimmed to the clean length.
    Room(&'a RirSet),
    /// Log-mels cached as `<dir>/<utterance_id>.melt`.
    Cached(&'a Path),
}

#[derive(Debug, Clone)]
pub struct LoadSpec<'a> {
    pub audio: Option<AudioSource<'a>>,
    pub video: bool,
    pub mel: MelConfig,
    pub jobs: usize,
}

/// Decodes an entry's waveform for `source`; cached log-mels have none.
pub(crate) fn load_audio(manifest: &UtteranceManifest, e: &ManifestEntry, source: AudioSource, rate: u32) -> Result<MultiChannelAudio> {
    match source {
        AudioSource::Cached(_) => Err(Error::InvalidArgument("cached features carry no waveform".into())),
        AudioSource::Clean => read_wav_at(manifest.resolve(&e.clean_audio_path), rate),
        AudioSource::Multichannel => {
            let p = e
                .multichannel_audio_path
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("{} has no multichannel audio", e.utterance_id)))?;
            read_wav_at(manifest.resolve(p), rate)
        }
        AudioSource::Room(rirs) => {
            let clean = read_wav_at(manifest.resolve(&e.clean_audio_path), rate)?.channel(0)?;
            let n = clean.samples.len();
            let mut rev = convolve_rir(&clean, rirs)?;
            for ch in &mut rev.channels {
                ch.truncate(n);
            }
            Ok(rev)
        }
    }
}

/// Decodes the entries of `split`, in manifest order.
pub fn load_samples(manifest: &UtteranceManifest, split: Split, spec: &LoadSpec) -> Result<Vec<Sample>> {
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    let extractor = match spec.audio {
        Some(_) => Some(MelExtractor::new(spec.mel.clone())?),
        None => None,
    };
    par_map(spec.jobs, &entries, |_, e| {
        let mel = match (spec.audio, &extractor) {
            (Some(AudioSource::Cached(dir)), _) => Some(read_melt(dir.join(format!("{}.melt", e.utterance_id)))?),
            (Some(src), Some(x)) => Some(x.extract(&load_audio(manifest, e, src, spec.mel.sample_rate_hz)?)?),
            _ => None,
        };
        let clip = if spec.video {
            let p = e
                .video_clip_path
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("{} has no video clip", e.utterance_id)))?;
            Some(read_clip(manifest.resolve(p))?)
        } else {
            None
        };
        Ok(Sample {
            id: e.utterance_id.clone(),
            label: e.label.index(),
            mel,
            clip,
        })
    })
}

fn stack(parts: Vec<Tensor>) -> Result<Tensor> {
    let inner = parts[0].shape.clone();
    let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
    for p in &parts {
        if p.shape != inner {
            return Err(Error::shape("batch", &inner, &p.shape));
        }
        data.extend_from_slice(&p.data);
    }
    let mut shape = vec![parts.len()];
    shape.extend(inner);
    Tensor::new(shape, data)
}

/// Builds encoder inputs for a batch. `train` carries the training config
/// and the epoch seed; augmentation seeds are derived from the utterance id.
pub fn batch_input(model: &ModelConfig, batch: &[&Sample], train: Option<(&TrainConfig, u64)>) -> Result<ModelInput> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let audio = match &model.audio {
        Some(cfg) => {
            let parts = batch
                .iter()
                .map(|s| {
                    let mel = s.mel.as_ref().ok_or_else(|| Error::InvalidArgument(format!("{} has no audio features", s.id)))?;
                    match train.and_then(|(tc, seed)| tc.spec_augment.as_ref().map(|sa| (sa, seed))) {
                        Some((sa, seed)) => prepare_input(&spec_augment(mel, sa, derive_seed_str(seed, &format!("spec/{}", s.id))), cfg),
                        None => prepare_input(mel, cfg),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Some(stack(parts)?)
        }
        None => None,
    };
    let video = match &model.video {
        Some(cfg) => {
            let parts = batch
                .iter()
                .map(|s| {
                    let clip = s.clip.as_ref().ok_or_else(|| Error::InvalidArgument(format!("{} has no video clip", s.id)))?;
                    let seed = train.map_or(0, |(_, seed)| derive_seed_str(seed, &format!("video/{}", s.id)));
                    to_channel_major(&sample_and_augment(clip, cfg, train.is_some(), seed)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(stack(parts)?)
        }
        None => None,
    };
    Ok(ModelInput { audio, video })
}
