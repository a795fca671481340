use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::PathBuf;

use mer_core::acoustics::RoomConstraints;
use mer_core::corpus::*;
use mer_core::dataset::{extract_features, simulate_rooms, synthesize_dataset, write_rir_set, SynthesisConfig};
use mer_core::frontend::MelConfig;
use mer_core::synth::MultiChannelAudio;
use mer_core::train::toy::toy_mel_config;
use mer_core::train::{load_samples, AudioSource, LoadSpec};
use mer_core::wav::{read_wav, write_wav, WavFormat};
use proptest::prelude::*;

#[test]
fn split_sizes_for_24_and_10_actors() {
    assert_eq!(split_sizes(24, (0.8, 0.1, 0.1)).unwrap(), (19, 2, 3));
    assert_eq!(split_sizes(10, (0.8, 0.1, 0.1)).unwrap(), (8, 1, 1));
    assert!(split_sizes(10, (0.8, 0.1, 0.2)).is_err());
}

#[test]
fn test_set_of_three_actors_matches_reported_accuracy_grain() {
    let (_, _, test) = split_sizes(24, (0.8, 0.1, 0.1)).unwrap();
    let n = test * 60;
    assert_eq!(n, 180);
    // Reported one-decimal accuracies that a 180-utterance set can produce,
    // whether rounded or truncated.
    for reported in [42.7, 78.3] {
        let hit = (0..=n).any(|k| (100.0 * k as f64 / n as f64 - reported).abs() < 0.1);
        assert!(hit, "{reported} is not a multiple of 1/{n}");
    }
}

#[test]
fn split_is_deterministic_and_errors_on_tiny_inputs() {
    let actors: Vec<u32> = (1..=24).collect();
    assert_eq!(build_split(&actors, (0.8, 0.1, 0.1), 5).unwrap(), build_split(&actors, (0.8, 0.1, 0.1), 5).unwrap());
    assert!(build_split(&[1, 2], (0.8, 0.1, 0.1), 0).is_err());
    assert!(build_split(&(1..=5).collect::<Vec<_>>(), (0.8, 0.1, 0.1), 0).is_err());
}

fn fake_manifest(assign: &BTreeMap<u32, Split>) -> UtteranceManifest {
    let entries = assign
        .keys()
        .flat_map(|&a| {
            (0..60).map(move |i| ManifestEntry {
                utterance_id: format!("a{a:02}-{i:02}"),
                actor_id: a,
                label: EmotionLabel::from_index(i % 8).unwrap(),
                clean_audio_path: PathBuf::from(format!("a{a}/{i}.wav")),
                multichannel_audio_path: None,
                video_clip_path: None,
                rir_provenance: None,
                split: Split::Train,
            })
        })
        .collect();
    UtteranceManifest {
        entries,
        base_dir: PathBuf::new(),
    }
}

#[test]
fn actor_exclusivity_over_200_seeds() {
    let actors: Vec<u32> = (1..=24).collect();
    for seed in 0..200 {
        let assign = build_split(&actors, (0.8, 0.1, 0.1), seed).unwrap();
        let mut m = fake_manifest(&assign);
        m.apply_split(&assign).unwrap();
        let mut per_split: BTreeMap<Split, BTreeSet<u32>> = BTreeMap::new();
        for e in &m.entries {
            per_split.entry(e.split).or_default().insert(e.actor_id);
        }
        let sizes: Vec<usize> = Split::ALL.iter().map(|s| per_split[s].len()).collect();
        assert_eq!(sizes, [19, 2, 3]);
        let union: BTreeSet<u32> = per_split.values().flatten().copied().collect();
        assert_eq!(union.len(), 24);
        assert_eq!(m.split(Split::Test).len(), 180);
    }
}

proptest! {
    #[test]
    fn every_actor_lands_in_exactly_one_nonempty_split(n in 3usize..60, seed in any::<u64>()) {
        let actors: Vec<u32> = (0..n as u32).collect();
        match build_split(&actors, (0.8, 0.1, 0.1), seed) {
            Ok(a) => {
                prop_assert_eq!(a.len(), n);
                for s in Split::ALL {
                    prop_assert!(a.values().any(|&v| v == s));
                }
            }
            Err(_) => prop_assert!(split_sizes(n, (0.8, 0.1, 0.1)).unwrap().1 == 0),
        }
    }

    #[test]
    fn labels_map_both_ways(i in 0usize..8) {
        let l = EmotionLabel::from_index(i).unwrap();
        prop_assert_eq!(l.index(), i);
        prop_assert_eq!(l.name().parse::<EmotionLabel>().unwrap(), l);
    }
}

#[test]
fn manifest_survives_write_read_write() {
    let dir = tempfile::tempdir().unwrap();
    let assign = build_split(&(1..=10).collect::<Vec<_>>(), (0.8, 0.1, 0.1), 1).unwrap();
    let mut m = fake_manifest(&assign);
    m.apply_split(&assign).unwrap();
    m.entries[3].video_clip_path = Some("v/3.pclp".into());
    m.entries[4].rir_provenance = Some("synthetic:17".into());
    let p1 = dir.path().join("a.jsonl");
    let p2 = dir.path().join("b.jsonl");
    write_manifest(&p1, &m).unwrap();
    let back = read_manifest(&p1).unwrap();
    assert_eq!(back.entries, m.entries);
    write_manifest(&p2, &back).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    fs::write(&p2, "{\"utterance_id\": 3}\n").unwrap();
    assert!(read_manifest(&p2).is_err());
}

#[test]
fn clip_survives_write_read_write() {
    let dir = tempfile::tempdir().unwrap();
    let data: Vec<u8> = (0..8 * 5 * 7 * 3).map(|i| (i * 31 % 251) as u8).collect();
    let clip = VideoClip::new(8, 5, 7, data).unwrap();
    let p1 = dir.path().join("a.pclp");
    let p2 = dir.path().join("b.pclp");
    write_clip(&p1, &clip).unwrap();
    let back = read_clip(&p1).unwrap();
    assert_eq!(back, clip);
    write_clip(&p2, &back).unwrap();
    let bytes = fs::read(&p1).unwrap();
    assert_eq!(bytes, fs::read(&p2).unwrap());
    assert_eq!(&bytes[..4], b"PCLP");
    assert_eq!(bytes[4..20], [1, 0, 0, 0, 8, 0, 0, 0, 5, 0, 0, 0, 7, 0, 0, 0]);
    assert!(VideoClip::new(7, 5, 7, vec![0; 7 * 5 * 7 * 3]).is_err());
    fs::write(&p2, &bytes[..30]).unwrap();
    assert!(read_clip(&p2).is_err());
}

/// Tone energy at `hz` (Goertzel power).
fn tone_power(x: &[f32], hz: f64, rate: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * hz / rate;
    let (mut s1, mut s2) = (0.0, 0.0);
    for &v in x {
        let s = v as f64 + 2.0 * w.cos() * s1 - s2;
        s2 = s1;
        s1 = s;
    }
    s1 * s1 + s2 * s2 - 2.0 * w.cos() * s1 * s2
}

/// Horizontal brightness centroid of a frame.
fn centroid_x(clip: &VideoClip, f: usize) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for y in 0..clip.height {
        for x in 0..clip.width {
            let v = clip.pixel(f, y, x).iter().map(|&c| c as f64).sum::<f64>();
            num += v * x as f64;
            den += v;
        }
    }
    num / den
}

#[test]
fn toy_corpus_is_balanced_with_complementary_cues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ToyCorpusConfig {
        n_per_class: 12,
        actors: 12,
        ..ToyCorpusConfig::default()
    }
    .noiseless();
    let m = generate_toy_corpus(dir.path(), &cfg, 3).unwrap();
    m.validate().unwrap();
    let mut counts = [0usize; 4];
    let (mut audio_hits, mut video_hits, mut joint_hits) = (0, 0, 0);
    for e in &m.entries {
        let label = e.label.index();
        counts[label] += 1;
        let wav = read_wav(m.resolve(&e.clean_audio_path)).unwrap();
        let a = usize::from(tone_power(&wav.channels[0], 800.0, 16_000.0) > tone_power(&wav.channels[0], 400.0, 16_000.0));
        let clip = read_clip(m.resolve(e.video_clip_path.as_ref().unwrap())).unwrap();
        let v = usize::from(centroid_x(&clip, clip.frame_count - 1) > centroid_x(&clip, 0));
        // Ideal unimodal classifiers must guess the other bit.
        audio_hits += usize::from(2 * a == label);
        video_hits += usize::from(v == label);
        joint_hits += usize::from(2 * a + v == label);
    }
    assert_eq!(counts, [12; 4]);
    let n = m.entries.len() as f64;
    let bound = 0.5 + 3.0 * (0.25 / n).sqrt();
    assert!(audio_hits as f64 / n <= bound);
    assert!(video_hits as f64 / n <= bound);
    assert_eq!(joint_hits, m.entries.len());
    // No actor is shared between splits.
    let mut seen = BTreeMap::new();
    for e in &m.entries {
        assert_eq!(*seen.entry(e.actor_id).or_insert(e.split), e.split);
    }
}

#[test]
fn toy_corpus_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = ToyCorpusConfig {
        n_per_class: 4,
        actors: 4,
        split_ratios: (0.5, 0.25, 0.25),
        ..ToyCorpusConfig::default()
    };
    let ma = generate_toy_corpus(a.path(), &cfg, 9).unwrap();
    generate_toy_corpus(b.path(), &cfg, 9).unwrap();
    for e in &ma.entries {
        for p in [&e.clean_audio_path, e.video_clip_path.as_ref().unwrap()] {
            assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap());
        }
    }
    assert!(generate_toy_corpus(a.path(), &ToyCorpusConfig { n_per_class: 3, ..cfg }, 9).is_err());
}

fn write_rir_wav(path: &std::path::Path, channels: usize) {
    let chans = (0..channels).map(|c| (0..64).map(|i| if i == c { 1.0 } else { 0.01 }).collect()).collect();
    write_wav(path, &MultiChannelAudio::new(16_000, chans).unwrap(), WavFormat::Pcm24).unwrap();
}

#[test]
fn ingest_reads_rooms_and_reports_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    for i in 0..7 {
        write_rir_wav(&dir.path().join(format!("room{i}.wav")), 3);
    }
    let (sets, failures) = ingest_external_rirs(dir.path(), 16_000).unwrap();
    assert_eq!(sets.len(), 7);
    assert!(failures.is_empty());
    assert!(sets.iter().all(|s| s.channel_count() == 3));
    assert_eq!(sets[2].name, "room2");

    write_rir_wav(&dir.path().join("mono.wav"), 1);
    fs::write(dir.path().join("mono.json"), r#"{"name": "office", "t60_s": 0.4}"#).unwrap();
    fs::write(dir.path().join("broken.wav"), b"not a wav").unwrap();
    let (sets, failures) = ingest_external_rirs(dir.path(), 16_000).unwrap();
    assert_eq!(sets.len(), 8);
    assert_eq!(failures.len(), 1);
    assert!(failures[0].0.ends_with("broken.wav"));
    let mono = sets.iter().find(|s| s.name == "office").unwrap();
    assert_eq!((mono.channel_count(), mono.t60_s), (1, Some(0.4)));

    // Files at another rate are resampled on ingest.
    let rate = tempfile::tempdir().unwrap();
    write_wav(rate.path().join("r.wav"), &MultiChannelAudio::new(48_000, vec![vec![0.1; 3000]]).unwrap(), WavFormat::Float32).unwrap();
    let (sets, _) = ingest_external_rirs(rate.path(), 16_000).unwrap();
    assert_eq!(sets[0].sample_rate_hz, 16_000);
    assert!((sets[0].len() as i64 - 1000).abs() <= 1);

    let empty = tempfile::tempdir().unwrap();
    let (sets, failures) = ingest_external_rirs(empty.path(), 16_000).unwrap();
    assert!(sets.is_empty() && failures.is_empty());
}

fn quick_synthesis() -> SynthesisConfig {
    let mut cfg = SynthesisConfig::default();
    cfg.rooms = RoomConstraints {
        t60_range_s: (0.2, 0.3),
        ..RoomConstraints::default()
    };
    cfg
}

#[test]
fn simulated_rooms_are_written_in_an_ingestible_form() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_synthesis();
    let rooms = simulate_rooms(4, 3, &cfg, 2).unwrap();
    assert_eq!(rooms, simulate_rooms(4, 3, &cfg, 1).unwrap());
    for r in &rooms {
        write_rir_set(dir.path(), r).unwrap();
    }
    let (back, failures) = ingest_external_rirs(dir.path(), 16_000).unwrap();
    assert!(failures.is_empty());
    assert_eq!(back.len(), 3);
    for (a, b) in rooms.iter().zip(&back) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.t60_s, b.t60_s);
        assert_eq!(a.rirs, b.rirs);
    }
}

#[test]
fn dataset_synthesis_is_deterministic_across_job_counts() {
    let src = tempfile::tempdir().unwrap();
    let toy = ToyCorpusConfig {
        n_per_class: 4,
        actors: 4,
        split_ratios: (0.5, 0.25, 0.25),
        ..ToyCorpusConfig::default()
    };
    let m = generate_toy_corpus(src.path(), &toy, 2).unwrap();
    let cfg = quick_synthesis();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = synthesize_dataset(&m, a.path(), &cfg, 7, 1).unwrap();
    let mb = synthesize_dataset(&m, b.path(), &cfg, 7, 3).unwrap();
    assert_eq!(ma.entries.len(), 16);
    ma.validate().unwrap();
    let reread = read_manifest(a.path().join("manifest.jsonl")).unwrap();
    assert_eq!(reread.entries, ma.entries);
    let mut rooms = BTreeSet::new();
    for (ea, eb) in ma.entries.iter().zip(&mb.entries) {
        let pa = ma.resolve(ea.multichannel_audio_path.as_ref().unwrap());
        let pb = mb.resolve(eb.multichannel_audio_path.as_ref().unwrap());
        assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap());
        let multi = read_wav(&pa).unwrap();
        let clean = read_wav(ma.resolve(&ea.clean_audio_path)).unwrap();
        assert_eq!(multi.channel_count(), 3);
        assert_eq!(multi.len(), clean.len());
        assert!(ea.rir_provenance.as_ref().unwrap().starts_with("synthetic:"));
        rooms.insert(ea.rir_provenance.clone());
        assert_eq!(ea.split, m.entries.iter().find(|e| e.utterance_id == ea.utterance_id).unwrap().split);
    }
    assert_eq!(rooms.len(), 16, "each utterance gets its own room");
}

#[test]
fn cached_features_match_direct_extraction() {
    let src = tempfile::tempdir().unwrap();
    let toy = ToyCorpusConfig {
        n_per_class: 4,
        actors: 4,
        split_ratios: (0.5, 0.25, 0.25),
        ..ToyCorpusConfig::default()
    };
    let m = generate_toy_corpus(src.path(), &toy, 4).unwrap();
    let mel: MelConfig = toy_mel_config();
    let cache = src.path().join("mel");
    assert_eq!(extract_features(&m, AudioSource::Clean, &mel, &cache, 2).unwrap(), 16);
    let spec = |audio| LoadSpec {
        audio: Some(audio),
        video: false,
        mel: mel.clone(),
        jobs: 1,
    };
    let direct = load_samples(&m, Split::Train, &spec(AudioSource::Clean)).unwrap();
    let cached = load_samples(&m, Split::Train, &spec(AudioSource::Cached(&cache))).unwrap();
    for (a, b) in direct.iter().zip(&cached) {
        assert_eq!(a.mel, b.mel);
    }
}
