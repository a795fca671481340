//! Small architectures sized for the synthetic toy corpus.

use crate::audio_encoder::{AudioEncoderConfig, AudioFusionMode};
use crate::error::Result;
use crate::frontend::MelConfig;
use crate::fusion::HeadMode;
use crate::model::ModelConfig;
use crate::video::{VideoAugmentConfig, VideoEncoderConfig};

use super::TrainConfig;

/// Log-mel settings for toy clips: 32 bands.
pub fn toy_mel_config() -> MelConfig {
    MelConfig {
        n_mels: 32,
        ..MelConfig::default()
    }
}

pub fn toy_audio_encoder(fusion_mode: AudioFusionMode, channels: usize) -> AudioEncoderConfig {
    AudioEncoderConfig {
        embed_dim: 8,
        depths: vec![1, 1],
        heads: vec![1, 2],
        patch_size: 4,
        window_size: 4,
        mlp_ratio: 2,
        mel_bands: 32,
        frames: 32,
        fusion_mode,
        channels,
        ..AudioEncoderConfig::default()
    }
}

/// Geometric augmentation stays off: a horizontal flip reverses the motion
/// that carries the video label.
pub fn toy_video_encoder() -> VideoEncoderConfig {
    VideoEncoderConfig {
        frames_per_clip: 8,
        resize: 20,
        crop: 16,
        widths: vec![8, 16],
        blocks: vec![1, 1],
        stem_kernel: 3,
        embed_dim: 16,
        augment: VideoAugmentConfig {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            max_rotation_deg: 0.0,
            random_crop: false,
        },
    }
}

pub fn toy_model(mode: HeadMode, fusion_mode: AudioFusionMode, channels: usize) -> Result<ModelConfig> {
    ModelConfig::new(mode, Some(toy_audio_encoder(fusion_mode, channels)), Some(toy_video_encoder()), 32, 4)
}

/// Audio-only classifier over `classes` labels.
pub fn toy_audio_model(fusion_mode: AudioFusionMode, channels: usize, classes: usize) -> Result<ModelConfig> {
    ModelConfig::new(HeadMode::AudioOnly, Some(toy_audio_encoder(fusion_mode, channels)), None, 32, classes)
}

pub fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 32,
        max_epochs: 15,
        patience: 5,
        warmup_steps: 20,
        seed,
        spec_augment: None,
    }
}
