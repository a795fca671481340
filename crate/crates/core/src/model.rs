//! The complete classifier: optional audio and video encoders and the head.

use serde::{Deserialize, Serialize};

use crate::audio_encoder::{encode_audio, init_audio_params, AudioEncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{classify, fuse, init_head_params, FusionConfig, HeadMode, Modality};
use crate::nn::{Bindings, Graph, ParamStore, Scalar, Tensor, Var};
use crate::rng;
use crate::video::{encode_video, init_video_params, VideoEncoderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<AudioEncoderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<VideoEncoderConfig>,
    pub head: FusionConfig,
}

impl ModelConfig {
    /// Builds a consistent config, deriving the head's input sizes.
    pub fn new(mode: HeadMode, audio: Option<AudioEncoderConfig>, video: Option<VideoEncoderConfig>, hidden_dim: usize, class_count: usize) -> Result<Self> {
        let cfg = Self {
            head: FusionConfig {
                audio_dim: audio.as_ref().map_or(0, AudioEncoderConfig::output_dim),
                video_dim: video.as_ref().map_or(0, |v| v.embed_dim),
                hidden_dim,
                class_count,
                mode,
            },
            audio: audio.filter(|_| mode.uses(Modality::Audio)),
            video: video.filter(|_| mode.uses(Modality::Video)),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mode = self.head.mode;
        let cfg_err = |msg: String| Err(Error::Config { key: "model".into(), msg });
        if mode.uses(Modality::Audio) != self.audio.is_some() || mode.uses(Modality::Video) != self.video.is_some() {
            return cfg_err(format!("encoders present do not match head mode {mode:?}"));
        }
        if let Some(a) = &self.audio {
            a.validate()?;
            if a.output_dim() != self.head.audio_dim {
                return cfg_err(format!("audio embedding {} != head audio_dim {}", a.output_dim(), self.head.audio_dim));
            }
        }
        if let Some(v) = &self.video {
            v.validate()?;
            if v.embed_dim != self.head.video_dim {
                return cfg_err(format!("video embedding {} != head video_dim {}", v.embed_dim, self.head.video_dim));
            }
        }
        if let (Some(a), Some(v)) = (&self.audio, &self.video) {
            if a.output_dim() != v.embed_dim {
                return cfg_err(format!("video embedding {} must equal audio embedding {}", v.embed_dim, a.output_dim()));
            }
        }
        self.head.validate()
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut store = ParamStore::new();
        if let Some(a) = &self.audio {
            init_audio_params(&mut store, &mut rng::rng(rng::derive_seed_str(seed, "audio")), a)?;
        }
        if let Some(v) = &self.video {
            init_video_params(&mut store, &mut rng::rng(rng::derive_seed_str(seed, "video")), v)?;
        }
        init_head_params(&mut store, &mut rng::rng(rng::derive_seed_str(seed, "head")), &self.head)?;
        Ok(store)
    }
}

/// A batch of prepared inputs.
#[derive(Debug, Clone, Default)]
pub struct ModelInput<T: Scalar = f32> {
    /// `[B, C, F_pad, T_pad]`.
    pub audio: Option<Tensor<T>>,
    /// `[B, 3, frames, crop, crop]`.
    pub video: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Var,
    pub audio: Option<Var>,
    pub video: Option<Var>,
    /// Head input: the fused vector, or the single embedding.
    pub features: Var,
}

pub fn forward<T: Scalar>(g: &mut Graph<T>, p: &Bindings, cfg: &ModelConfig, input: ModelInput<T>) -> Result<ModelOutput> {
    let audio = match (&cfg.audio, input.audio) {
        (Some(a), Some(x)) => {
            let x = g.constant(x);
            Some(encode_audio(g, p, a, x)?.embedding)
        }
        (Some(_), None) => return Err(Error::InvalidArgument("model needs audio input".into())),
        _ => None,
    };
    let video = match (&cfg.video, input.video) {
        (Some(v), Some(x)) => {
            let x = g.constant(x);
            Some(encode_video(g, p, v, x)?)
        }
        (Some(_), None) => return Err(Error::InvalidArgument("model needs video input".into())),
        _ => None,
    };
    let features = match (video, audio) {
        (Some(v), Some(a)) => fuse(g, &cfg.head, v, a)?,
        (Some(v), None) => v,
        (None, Some(a)) => a,
        (None, None) => return Err(Error::InvalidArgument("model has no encoder".into())),
    };
    let logits = classify(g, p, features)?;
    g.check_finite(logits, "head")?;
    Ok(ModelOutput {
        logits,
        audio,
        video,
        features,
    })
}

