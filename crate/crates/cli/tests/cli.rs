use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

/// Runs `mer` with the toy config and a fast schedule.
fn mer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mer"))
        .arg("--config")
        .arg(toy_config())
        .args(["-q", "--set", "toy.n_per_class=10", "--set", "toy.actors=10", "--set", "train.max_epochs=4", "--set", "train.patience=2"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// The single JSON error line of a failed run.
fn error_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    serde_json::from_str(lines[0]).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy(dir: &Path) -> PathBuf {
    let out = dir.join("toy");
    ok(&mer(&["--seed", "4", "dataset", "toy", "--out", s(&out)]));
    out.join("manifest.jsonl")
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy(dir.path());
    let (a, b) = (dir.path().join("a.emck"), dir.path().join("b.emck"));
    for ck in [&a, &b] {
        let stdout = ok(&mer(&["--seed", "1", "train", "--manifest", s(&manifest), "--audio", "clean", "--out", s(ck)]));
        let v: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
        assert!(v["epochs"].as_u64().unwrap() <= 4);
    }
    let bytes = fs::read(&a).unwrap();
    assert_eq!(&bytes[..4], b"EMCK");
    assert_eq!(bytes, fs::read(&b).unwrap());
    let c = dir.path().join("c.emck");
    ok(&mer(&["--seed", "2", "train", "--manifest", s(&manifest), "--audio", "clean", "--out", s(&c)]));
    assert_ne!(bytes, fs::read(&c).unwrap());
}

#[test]
fn dry_run_prints_the_plan_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    let stdout = ok(&mer(&["--dry-run", "dataset", "toy", "--out", s(&out)]));
    let plan: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(plan["command"], "dataset toy");
    assert_eq!(plan["writes"][0], s(&out));
    assert!(!out.exists());
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = s(dir.path());
    let e = error_json(&mer(&["--set", "synthesis.noise_coeff=1.5", "dataset", "toy", "--out", o]));
    assert_eq!(e["error"], "config");
    assert_eq!(e["key"], "synthesis.noise_coeff");
    let e = error_json(&mer(&["--set", "train.learning_rate=1", "dataset", "toy", "--out", o]));
    assert_eq!(e["key"], "learning_rate");
    let e = error_json(&mer(&["--set", "train.lr=-1", "dataset", "toy", "--out", o]));
    assert_eq!(e["key"], "train");
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn missing_inputs_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ghost = dir.path().join("ghost.jsonl");
    let e = error_json(&mer(&["train", "--manifest", s(&ghost), "--out", s(&dir.path().join("x.emck"))]));
    assert_eq!(e["error"], "io");
    assert_eq!(e["path"], s(&ghost));
    let e = error_json(&Command::new(env!("CARGO_BIN_EXE_mer")).args(["--config", s(&ghost), "dataset", "toy", "--out", "x"]).output().unwrap());
    assert_eq!(e["path"], s(&ghost));
}

#[test]
fn simulation_and_synthesis_do_not_depend_on_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy(dir.path());
    for jobs in ["1", "3"] {
        let rooms = dir.path().join(format!("rooms{jobs}"));
        ok(&mer(&["--jobs", jobs, "rir", "simulate", "--count", "3", "--mics", "2", "--out", s(&rooms)]));
        let syn = dir.path().join(format!("syn{jobs}"));
        ok(&mer(&["--jobs", jobs, "dataset", "synthesize", "--manifest", s(&manifest), "--mics", "2", "--out", s(&syn)]));
    }
    for name in ["room000.wav", "room002.json"] {
        assert_eq!(fs::read(dir.path().join("rooms1").join(name)).unwrap(), fs::read(dir.path().join("rooms3").join(name)).unwrap());
    }
    let m1 = fs::read_to_string(dir.path().join("syn1/manifest.jsonl")).unwrap();
    assert_eq!(m1.lines().count(), 40);
    for line in m1.lines().take(5) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let rel = v["multichannel_audio_path"].as_str().unwrap();
        assert_eq!(fs::read(dir.path().join("syn1").join(rel)).unwrap(), fs::read(dir.path().join("syn3").join(rel)).unwrap());
    }
}

#[test]
fn benchmark_writes_one_row_per_room_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy(dir.path());
    let cks = dir.path().join("ck");
    let rooms = dir.path().join("rooms");
    ok(&mer(&["rir", "simulate", "--count", "2", "--mics", "3", "--out", s(&rooms)]));
    let train = |mode: &str, fusion: &str, channels: &str, name: &str| {
        let out = cks.join(format!("{name}.emck"));
        ok(&mer(&[
            "--set",
            &format!("model.mode={mode}"),
            "--set",
            &format!("model.audio.fusion_mode={fusion}"),
            "--set",
            &format!("model.audio.channels={channels}"),
            "train",
            "--manifest",
            s(&manifest),
            "--audio",
            "clean",
            "--out",
            s(&out),
        ]));
    };
    train("video_only", "single", "1", "video_only");
    train("audio_only", "single", "1", "audio_rev_single");
    train("multimodal", "single", "1", "mer_rev_single");

    let csv = dir.path().join("bench.csv");
    let stdout = ok(&mer(&["benchmark", "--rooms", s(&rooms), "--manifest", s(&manifest), "--checkpoints", s(&cks), "--modes", "all", "--out", s(&csv)]));
    let v: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(v["rows"], 5);
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("-,,video_only,"));
    for room in ["room000", "room001"] {
        for mode in ["audio_rev_single", "mer_rev_single"] {
            assert!(rows.iter().any(|r| r.starts_with(&format!("{room},")) && r.contains(&format!(",{mode},"))), "{room} {mode}");
        }
    }

    // An explicitly requested mode without a checkpoint is an error naming it.
    let e = error_json(&mer(&["benchmark", "--rooms", s(&rooms), "--manifest", s(&manifest), "--checkpoints", s(&cks), "--modes", "mer_sum_pe", "--out", s(&csv)]));
    assert!(e["path"].as_str().unwrap().ends_with("mer_sum_pe.emck"));
}

#[test]
fn warm_start_evaluate_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy(dir.path());
    let ck = |n: &str| dir.path().join(format!("{n}.emck"));
    let base = ["train", "--manifest", s(&manifest), "--audio", "clean"];
    ok(&mer(&[&["--set", "model.mode=audio_only"], &base[..], &["--out", s(&ck("audio"))]].concat()));
    ok(&mer(&[&["--set", "model.mode=video_only"], &base[..], &["--out", s(&ck("video"))]].concat()));
    let history = dir.path().join("history.csv");
    ok(&mer(&[&base[..], &["--init-from", s(&ck("audio")), "--init-from", s(&ck("video")), "--history", s(&history), "--out", s(&ck("mer"))]].concat()));
    assert!(fs::read_to_string(&history).unwrap().starts_with("epoch,train_loss,val_loss,val_accuracy,lr\n"));

    let report = dir.path().join("report.json");
    let stdout = ok(&mer(&["evaluate", "--checkpoint", s(&ck("mer")), "--manifest", s(&manifest), "--audio", "clean", "--out", s(&report)]));
    let v: serde_json::Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(v["ci_low"].as_f64().unwrap() <= v["accuracy"].as_f64().unwrap());
    let full: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(full["predictions"].as_array().unwrap().len() as u64, v["n"].as_u64().unwrap());

    let emb = dir.path().join("emb.csv");
    ok(&mer(&["export-embeddings", "--checkpoint", s(&ck("mer")), "--manifest", s(&manifest), "--audio", "clean", "--kind", "video", "--out", s(&emb)]));
    let text = fs::read_to_string(&emb).unwrap();
    assert_eq!(text.lines().next().unwrap().split(',').count(), 2 + 16);

    // Mismatched encoders cannot be warm-started.
    let e = error_json(&mer(&[
        &["--set", "model.audio.depths=[2, 1]"],
        &base[..],
        &["--init-from", s(&ck("audio")), "--out", s(&ck("bad"))],
    ]
    .concat()));
    assert_eq!(e["error"], "invalid_argument");
}
