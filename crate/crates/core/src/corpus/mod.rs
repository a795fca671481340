//! Labels, manifests, actor-exclusive splits, packed video clips, external
//! RIR ingestion and the synthetic toy corpus.

mod clip;
mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::acoustics::RirSet;
use crate::error::{Error, Result};
use crate::rng;
use crate::wav;

pub use clip::{read_clip, write_clip, VideoClip, DEFAULT_FRAME_RATE_HZ};
pub use toy::{generate_toy_corpus, toy_label, ToyCorpusConfig, ToyNoiseChannels};

/// The eight emotion categories, in their RAVDESS numeric order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Neutral,
    Calm,
    Happy,
    Sad,
    Angry,
    Fearful,
    Disgust,
    Surprised,
}

impl EmotionLabel {
    pub const COUNT: usize = 8;
    pub const ALL: [EmotionLabel; 8] = [
        Self::Neutral,
        Self::Calm,
        Self::Happy,
        Self::Sad,
        Self::Angry,
        Self::Fearful,
        Self::Disgust,
        Self::Surprised,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("label index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Neutral => "neutral",
            Self::Calm => "calm",
            Self::Happy => "happy",
            Self::Sad => "sad",
            Self::Angry => "angry",
            Self::Fearful => "fearful",
            Self::Disgust => "disgust",
            Self::Surprised => "surprised",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown emotion label {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub actor_id: u32,
    pub label: EmotionLabel,
    pub clean_audio_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multichannel_audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_clip_path: Option<PathBuf>,
    /// Synthetic room seed or external RIR id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rir_provenance: Option<String>,
    pub split: Split,
}

/// Utterance list. Relative paths resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UtteranceManifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl UtteranceManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Checks actor exclusivity, label range and that referenced files exist.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<u32, Split> = BTreeMap::new();
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(&e.utterance_id) {
                return Err(Error::InvalidArgument(format!("duplicate utterance id {}", e.utterance_id)));
            }
            if let Some(prev) = seen.insert(e.actor_id, e.split) {
                if prev != e.split {
                    return Err(Error::InvalidArgument(format!(
                        "actor {} appears in both {prev} and {} splits",
                        e.actor_id, e.split
                    )));
                }
            }
            let paths = std::iter::once(&e.clean_audio_path)
                .chain(e.multichannel_audio_path.as_ref())
                .chain(e.video_clip_path.as_ref());
            for p in paths {
                let full = self.resolve(p);
                if !full.exists() {
                    return Err(Error::io(full, std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file is missing")));
                }
            }
        }
        Ok(())
    }

    /// Classes present in the manifest.
    pub fn label_set(&self) -> BTreeSet<EmotionLabel> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Reassigns every entry's split from an actor assignment.
    pub fn apply_split(&mut self, assignment: &BTreeMap<u32, Split>) -> Result<()> {
        for e in &mut self.entries {
            e.split = *assignment
                .get(&e.actor_id)
                .ok_or_else(|| Error::InvalidArgument(format!("actor {} has no split", e.actor_id)))?;
        }
        Ok(())
    }

    pub fn actors(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.actor_id).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

pub fn write_manifest(path: impl AsRef<Path>, manifest: &UtteranceManifest) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for e in &manifest.entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads a JSON-lines manifest; relative paths resolve against its directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<UtteranceManifest> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| Error::format("manifest", format!("{} line {}: {e}", path.display(), i + 1)))?;
        entries.push(entry);
    }
    Ok(UtteranceManifest {
        entries,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

/// Integer split sizes: train and val are rounded down, test takes the rest.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (tr, va, te) = ratios;
    if [tr, va, te].iter().any(|r| !(0.0..=1.0).contains(r)) || (tr + va + te - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let floor = |r: f64| (n as f64 * r + 1e-9).floor() as usize;
    let train = floor(tr);
    let val = floor(va);
    Ok((train, val, n - train - val))
}

/// Shuffles actors with `seed` and partitions them into train/val/test.
pub fn build_split(actor_ids: &[u32], ratios: (f64, f64, f64), seed: u64) -> Result<BTreeMap<u32, Split>> {
    let mut actors: Vec<u32> = actor_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if actors.len() < 3 {
        return Err(Error::EmptySplit(format!("need at least 3 actors, got {}", actors.len())));
    }
    let (train, val, test) = split_sizes(actors.len(), ratios)?;
    for (n, s) in [(train, Split::Train), (val, Split::Val), (test, Split::Test)] {
        if n == 0 {
            return Err(Error::EmptySplit(format!("{s} split would be empty for {} actors", actors.len())));
        }
    }
    actors.shuffle(&mut rng::rng(seed));
    Ok(actors
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            let s = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            (a, s)
        })
        .collect())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct RirSidecar {
    name: Option<String>,
    t60_s: Option<f64>,
}

/// Loads every `.wav` in `dir` as a named RIR set at `sample_rate_hz`.
///
/// Files that fail to load are returned with their error; the others proceed.
pub fn ingest_external_rirs(dir: impl AsRef<Path>, sample_rate_hz: u32) -> Result<(Vec<RirSet>, Vec<(PathBuf, Error)>)> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        log::warn!("no RIR files found in {}", dir.display());
    }
    let mut sets = Vec::new();
    let mut failures = Vec::new();
    for path in paths {
        match load_rir(&path, sample_rate_hz) {
            Ok(set) => sets.push(set),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                failures.push((path, e));
            }
        }
    }
    Ok((sets, failures))
}

fn load_rir(path: &Path, sample_rate_hz: u32) -> Result<RirSet> {
    let audio = wav::read_wav_at(path, sample_rate_hz)?;
    let sidecar_path = path.with_extension("json");
    let sidecar: RirSidecar = if sidecar_path.exists() {
        let text = fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        serde_json::from_str(&text)?
    } else {
        RirSidecar::default()
    };
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let set = RirSet {
        name: sidecar.name.unwrap_or(stem),
        sample_rate_hz,
        rirs: audio.channels,
        room: None,
        t60_s: sidecar.t60_s,
    };
    set.validate()?;
    Ok(set)
}
