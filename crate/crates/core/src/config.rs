//! Pipeline configuration: one TOML file with a section per stage, plus
//! `section.key=value` overrides from the command line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio_encoder::{AudioEncoderConfig, AudioFusionMode};
use crate::corpus::ToyCorpusConfig;
use crate::dataset::SynthesisConfig;
use crate::error::{Error, Result};
use crate::frontend::{MelConfig, SpecAugmentConfig};
use crate::fusion::HeadMode;
use crate::model::ModelConfig;
use crate::train::toy::{toy_audio_encoder, toy_mel_config, toy_train_config, toy_video_encoder};
use crate::train::{EvalConfig, TrainConfig};
use crate::video::VideoEncoderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub mode: HeadMode,
    pub hidden_dim: usize,
    pub class_count: usize,
    pub audio: AudioEncoderConfig,
    pub video: VideoEncoderConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            mode: HeadMode::Multimodal,
            hidden_dim: 512,
            class_count: 8,
            audio: AudioEncoderConfig::default(),
            video: VideoEncoderConfig::default(),
        }
    }
}

/// Every stage's settings. `train.seed` and `eval.seed` always follow the
/// global `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads for simulation, synthesis and feature extraction.
    pub jobs: usize,
    pub toy: ToyCorpusConfig,
    pub synthesis: SynthesisConfig,
    pub mel: MelConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            toy: ToyCorpusConfig::default(),
            synthesis: SynthesisConfig::default(),
            mel: MelConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config { key: key.into(), msg: "malformed key".into() });
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry.as_table_mut().ok_or_else(|| Error::Config {
            key: key.into(),
            msg: format!("{p} is not a section"),
        })?;
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Best-effort name of the offending key in a deserialization message.
fn error_key(msg: &str) -> String {
    msg.split('`').nth(1).map_or_else(|| "config".into(), str::to_string)
}

impl PipelineConfig {
    /// Small architecture and schedule for the synthetic toy corpus.
    pub fn toy() -> Self {
        let tc = toy_train_config(0);
        Self {
            mel: toy_mel_config(),
            model: ModelSection {
                mode: HeadMode::Multimodal,
                hidden_dim: 32,
                class_count: 4,
                audio: toy_audio_encoder(AudioFusionMode::Single, 1),
                video: toy_video_encoder(),
            },
            // Zero masks: the toy cue fills the whole spectrogram.
            train: TrainConfig {
                spec_augment: Some(SpecAugmentConfig {
                    time_masks: 0,
                    freq_masks: 0,
                    ..SpecAugmentConfig::default()
                }),
                ..tc
            },
            ..Self::default()
        }
    }

    /// Parses `text` (empty means all defaults), applies `key=value`
    /// overrides and validates the result.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config {
            key: "config".into(),
            msg: e.message().to_string(),
        })?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
                key: o.clone(),
                msg: "override must look like key=value".into(),
            })?;
            set_path(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let mut cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config {
            key: error_key(e.message()),
            msg: e.message().to_string(),
        })?;
        cfg.train.seed = cfg.seed;
        cfg.eval.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config {
            key: "config".into(),
            msg: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::Config { key: "jobs".into(), msg: "must be at least 1".into() });
        }
        self.synthesis.validate()?;
        self.mel.validate()?;
        self.train.validate()?;
        self.model_config()?;
        Ok(())
    }

    /// The classifier described by the `model` section.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        ModelConfig::new(m.mode, Some(m.audio.clone()), Some(m.video.clone()), m.hidden_dim, m.class_count)
    }
}
