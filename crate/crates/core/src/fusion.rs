//! Late fusion of the two embeddings and the two-layer classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::linear;
use crate::nn::{Bindings, Graph, ParamStore, Scalar, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    AudioOnly,
    VideoOnly,
    Multimodal,
}

impl HeadMode {
    pub fn uses(self, m: Modality) -> bool {
        match self {
            HeadMode::AudioOnly => m == Modality::Audio,
            HeadMode::VideoOnly => m == Modality::Video,
            HeadMode::Multimodal => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub audio_dim: usize,
    pub video_dim: usize,
    pub hidden_dim: usize,
    pub class_count: usize,
    pub mode: HeadMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            audio_dim: 768,
            video_dim: 768,
            hidden_dim: 512,
            class_count: 8,
            mode: HeadMode::Multimodal,
        }
    }
}

impl FusionConfig {
    pub fn input_dim(&self) -> usize {
        match self.mode {
            HeadMode::AudioOnly => self.audio_dim,
            HeadMode::VideoOnly => self.video_dim,
            HeadMode::Multimodal => self.video_dim + self.audio_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 || self.hidden_dim == 0 || self.class_count < 2 {
            return Err(Error::Config {
                key: "head".into(),
                msg: "dimensions must be positive and class_count at least 2".into(),
            });
        }
        Ok(())
    }
}

/// Creates `head.*` parameters.
pub fn init_head_params(store: &mut ParamStore, rng: &mut Rng, cfg: &FusionConfig) -> Result<()> {
    cfg.validate()?;
    store.init_linear(rng, "head.fc1", cfg.input_dim(), cfg.hidden_dim, true);
    store.init_linear(rng, "head.fc2", cfg.hidden_dim, cfg.class_count, true);
    Ok(())
}

/// `[f_v ‖ f_s]` along the feature axis of `[B, dim]` embeddings.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, cfg: &FusionConfig, video: Var, audio: Var) -> Result<Var> {
    let (vs, as_) = (g.shape(video).to_vec(), g.shape(audio).to_vec());
    if vs.len() != 2 || as_.len() != 2 || vs[1] != cfg.video_dim || as_[1] != cfg.audio_dim || vs[0] != as_[0] {
        return Err(Error::shape("fuse", &vs, &as_));
    }
    g.concat(&[video, audio], 1)
}

/// `fc2(ReLU(fc1(x)))`.
pub fn classify<T: Scalar>(g: &mut Graph<T>, p: &Bindings, x: Var) -> Result<Var> {
    let h = linear(g, p, "head.fc1", x)?;
    let h = g.relu(h);
    linear(g, p, "head.fc2", h)
}

/// Plain-vector concatenation, video first.
pub fn fuse_vectors(video: &[f32], audio: &[f32]) -> Vec<f32> {
    let mut v = Vec::with_capacity(video.len() + audio.len());
    v.extend_from_slice(video);
    v.extend_from_slice(audio);
    v
}

/// Inverse of [`fuse_vectors`].
pub fn split_fused(fused: &[f32], video_dim: usize) -> Result<(&[f32], &[f32])> {
    if video_dim > fused.len() {
        return Err(Error::shape("split_fused", &[fused.len()], &[video_dim]));
    }
    Ok(fused.split_at(video_dim))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
