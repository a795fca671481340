use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::{load_samples, AudioSource, LoadSpec, Sample};
use super::eval::{evaluate, EvalConfig, EvalReport};
use super::TrainedModel;
use crate::acoustics::RirSet;
use crate::audio_encoder::AudioFusionMode;
use crate::corpus::{Split, UtteranceManifest};
use crate::error::{Error, Result};

/// A benchmark row: which model family and which audio input it receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    VideoOnly,
    AudioCleanSingle,
    AudioRevSingle,
    AudioAvgMel,
    AudioSumPe,
    MerCleanSingle,
    MerRevSingle,
    MerAvgMel,
    MerSumPe,
}

impl BenchMode {
    pub const ALL: [BenchMode; 9] = [
        BenchMode::VideoOnly,
        BenchMode::AudioCleanSingle,
        BenchMode::AudioRevSingle,
        BenchMode::AudioAvgMel,
        BenchMode::AudioSumPe,
        BenchMode::MerCleanSingle,
        BenchMode::MerRevSingle,
        BenchMode::MerAvgMel,
        BenchMode::MerSumPe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::VideoOnly => "video_only",
            BenchMode::AudioCleanSingle => "audio_clean_single",
            BenchMode::AudioRevSingle => "audio_rev_single",
            BenchMode::AudioAvgMel => "audio_avg_mel",
            BenchMode::AudioSumPe => "audio_sum_pe",
            BenchMode::MerCleanSingle => "mer_clean_single",
            BenchMode::MerRevSingle => "mer_rev_single",
            BenchMode::MerAvgMel => "mer_avg_mel",
            BenchMode::MerSumPe => "mer_sum_pe",
        }
    }

    pub fn uses_audio(self) -> bool {
        self != BenchMode::VideoOnly
    }

    pub fn uses_video(self) -> bool {
        matches!(self, BenchMode::VideoOnly | BenchMode::MerCleanSingle | BenchMode::MerRevSingle | BenchMode::MerAvgMel | BenchMode::MerSumPe)
    }

    /// Audio fusion the mode's model must have.
    pub fn audio_fusion(self) -> Option<AudioFusionMode> {
        match self {
            BenchMode::VideoOnly => None,
            BenchMode::AudioCleanSingle | BenchMode::AudioRevSingle | BenchMode::MerCleanSingle | BenchMode::MerRevSingle => Some(AudioFusionMode::Single),
            BenchMode::AudioAvgMel | BenchMode::MerAvgMel => Some(AudioFusionMode::AvgMel),
            BenchMode::AudioSumPe | BenchMode::MerSumPe => Some(AudioFusionMode::SumPe),
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown benchmark mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomReport {
    /// Room name, or `"-"` for the reverberation-independent video row.
    pub room: String,
    pub t60_s: Option<f64>,
    pub mode: BenchMode,
    pub report: EvalReport,
}

fn check_model(mode: BenchMode, m: &TrainedModel) -> Result<()> {
    let has_video = m.config.video.is_some();
    let fusion = m.config.audio.as_ref().map(|a| a.fusion_mode);
    if has_video != mode.uses_video() || fusion != mode.audio_fusion() {
        return Err(Error::InvalidArgument(format!("checkpoint does not match benchmark mode {mode}")));
    }
    Ok(())
}

/// Evaluates every `(mode, model)` on the test split, reverberated by each
/// room. The video-only mode is evaluated once.
pub fn benchmark_rooms(
    models: &[(BenchMode, &TrainedModel)],
    manifest: &UtteranceManifest,
    rooms: &[RirSet],
    eval: &EvalConfig,
    jobs: usize,
) -> Result<Vec<RoomReport>> {
    for (mode, m) in models {
        check_model(*mode, m)?;
    }
    let mut out = Vec::new();
    for (mode, m) in models.iter().filter(|(mode, _)| !mode.uses_audio()) {
        let spec = LoadSpec {
            audio: None,
            video: true,
            mel: m.mel.clone(),
            jobs,
        };
        match load_samples(manifest, Split::Test, &spec) {
            Ok(samples) => out.push(RoomReport {
                room: "-".into(),
                t60_s: None,
                mode: *mode,
                report: evaluate(&m.config, &m.params, &samples, mode.name(), eval)?,
            }),
            Err(e) => log::warn!("skipping {mode}: {e}"),
        }
    }
    for room in rooms {
        // Decoded test sets keyed by (mel config, needs video).
        let mut cache: BTreeMap<(String, bool), Option<Vec<Sample>>> = BTreeMap::new();
        for (mode, m) in models.iter().filter(|(mode, _)| mode.uses_audio()) {
            let key = (serde_json::to_string(&m.mel)?, mode.uses_video());
            let samples = cache.entry(key).or_insert_with(|| {
                let spec = LoadSpec {
                    audio: Some(AudioSource::Room(room)),
                    video: mode.uses_video(),
                    mel: m.mel.clone(),
                    jobs,
                };
                match load_samples(manifest, Split::Test, &spec) {
                    Ok(s) => Some(s),
                    Err(e) => {
                        log::warn!("room {}: skipping modes needing video={}: {e}", room.name, mode.uses_video());
                        None
                    }
                }
            });
            let Some(samples) = samples else { continue };
            let condition = format!("{}/{}", room.name, mode.name());
            out.push(RoomReport {
                room: room.name.clone(),
                t60_s: room.t60_estimate(),
                mode: *mode,
                report: evaluate(&m.config, &m.params, samples, &condition, eval)?,
            });
        }
    }
    Ok(out)
}

pub fn write_reports_json(path: &Path, reports: &[RoomReport]) -> Result<()> {
    let s = serde_json::to_string_pretty(reports)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Columns `room,t60_s,mode,accuracy,ci_low,ci_high`.
pub fn write_reports_csv(path: &Path, reports: &[RoomReport]) -> Result<()> {
    let mut s = String::from("room,t60_s,mode,accuracy,ci_low,ci_high\n");
    for r in reports {
        let t60 = r.t60_s.map(|t| format!("{t:.3}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.4}\n",
            r.room, t60, r.mode, r.report.accuracy, r.report.ci_low, r.report.ci_high
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
