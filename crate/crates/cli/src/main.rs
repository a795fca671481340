//! `mer`: stage-oriented driver for room simulation, dataset synthesis,
//! feature caching, training, evaluation and benchmarking.

mod args;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use log::{info, warn};
use serde_json::json;

use args::{AudioArg, BenchCmd, Cli, Command, DatasetCmd, EmbedCmd, EvalCmd, FeaturesCmd, RirCmd, TrainCmd};
use mer_core::config::PipelineConfig;
use mer_core::corpus::{generate_toy_corpus, ingest_external_rirs, read_manifest, Split, UtteranceManifest};
use mer_core::dataset::{extract_features, simulate_rooms, synthesize_dataset, write_rir_set};
use mer_core::train::{
    benchmark_rooms, evaluate, export_embeddings, fit_input_norm, load_samples, train, train_from, warm_start, write_confusion_csv, write_embeddings_csv,
    write_history_csv, write_reports_csv, write_reports_json, AudioSource, BenchMode, LoadSpec, TrainedModel,
};
use mer_core::nn::ParamStore;
use mer_core::Error;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "warn" } else { "info" }))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// One JSON object describing the failure.
fn error_line(e: &Error) -> String {
    let mut v = json!({ "error": e.kind(), "message": e.to_string() });
    match e {
        Error::Config { key, .. } => v["key"] = json!(key),
        Error::Io { path, .. } => v["path"] = json!(path),
        _ => {}
    }
    v.to_string()
}

fn missing(path: &Path) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::NotFound, "input does not exist"),
    }
}

fn require(path: &Path) -> mer_core::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(path))
    }
}

fn resolve_config(cli: &Cli) -> mer_core::Result<PipelineConfig> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(jobs) = cli.jobs {
        overrides.push(format!("jobs={jobs}"));
    }
    overrides.extend(cli.command.overrides());
    let cfg = match &cli.config {
        Some(path) => {
            require(path)?;
            PipelineConfig::load(path, &overrides)?
        }
        None => PipelineConfig::from_toml_str("", &overrides)?,
    };
    info!("resolved config:\n{}", cfg.to_toml_string()?);
    Ok(cfg)
}

fn run(cli: &Cli) -> mer_core::Result<()> {
    let cfg = resolve_config(cli)?;
    let plan = cli.command.plan();
    for p in &plan.inputs {
        require(p)?;
    }
    if cli.dry_run {
        println!("{}", json!({ "command": plan.name, "reads": plan.inputs, "writes": plan.outputs }));
        return Ok(());
    }
    match &cli.command {
        Command::Rir { cmd: RirCmd::Simulate(a) } => {
            let rooms = simulate_rooms(cfg.seed, a.count, &cfg.synthesis, cfg.jobs)?;
            for room in &rooms {
                write_rir_set(&a.out, room)?;
                info!("{}: T60 {:.3} s", room.name, room.t60_s.unwrap_or(f64::NAN));
            }
            println!("{}", json!({ "rooms": rooms.len(), "out": a.out }));
        }
        Command::Dataset { cmd: DatasetCmd::Synthesize(a) } => {
            let manifest = read_manifest(&a.manifest)?;
            let out = synthesize_dataset(&manifest, &a.out, &cfg.synthesis, cfg.seed, cfg.jobs)?;
            println!("{}", json!({ "utterances": out.entries.len(), "manifest": a.out.join("manifest.jsonl") }));
        }
        Command::Dataset { cmd: DatasetCmd::Toy(a) } => {
            let m = generate_toy_corpus(&a.out, &cfg.toy, cfg.seed)?;
            println!("{}", json!({ "utterances": m.entries.len(), "manifest": a.out.join("manifest.jsonl") }));
        }
        Command::Features { cmd: FeaturesCmd::Extract(a) } => {
            let manifest = read_manifest(&a.manifest)?;
            let n = extract_features(&manifest, a.audio.source(), &cfg.mel, &a.out, cfg.jobs)?;
            println!("{}", json!({ "features": n, "out": a.out }));
        }
        Command::Train(a) => train_cmd(&cfg, a)?,
        Command::Evaluate(a) => evaluate_cmd(&cfg, a)?,
        Command::Benchmark(a) => benchmark_cmd(&cfg, a)?,
        Command::ExportEmbeddings(a) => export_cmd(&cfg, a)?,
    }
    Ok(())
}

fn audio_source<'a>(audio: AudioArg, features: Option<&'a Path>) -> AudioSource<'a> {
    match features {
        Some(dir) => AudioSource::Cached(dir),
        None => audio.source(),
    }
}

fn load_split(manifest: &UtteranceManifest, split: Split, model: &TrainedModel, source: AudioSource, jobs: usize) -> mer_core::Result<Vec<mer_core::train::Sample>> {
    let spec = LoadSpec {
        audio: model.config.audio.as_ref().map(|_| source),
        video: model.config.video.is_some(),
        mel: model.mel.clone(),
        jobs,
    };
    load_samples(manifest, split, &spec)
}

fn train_cmd(cfg: &PipelineConfig, a: &TrainCmd) -> mer_core::Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let sources = a.init_from.iter().map(|p| TrainedModel::load(p)).collect::<mer_core::Result<Vec<_>>>()?;
    let mut model = TrainedModel {
        config: cfg.model_config()?,
        mel: cfg.mel.clone(),
        params: ParamStore::new(),
    };
    let source = audio_source(a.audio, a.features.as_deref());
    let train_set = load_split(&manifest, Split::Train, &model, source, cfg.jobs)?;
    let val_set = load_split(&manifest, Split::Val, &model, source, cfg.jobs)?;
    // A warm-started audio encoder keeps the standardization it was trained with.
    match sources.iter().find_map(|s| s.config.audio.as_ref()) {
        Some(src) if model.config.audio.is_some() => {
            let audio = model.config.audio.as_mut().unwrap();
            audio.input_mean = src.input_mean;
            audio.input_std = src.input_std;
        }
        _ => fit_input_norm(&mut model.config, &train_set)?,
    }
    let refs: Vec<&TrainedModel> = sources.iter().collect();
    let out = if refs.is_empty() {
        train(&model.config, &cfg.train, &train_set, &val_set)?
    } else {
        let init = warm_start(&model.config, cfg.train.seed, &refs)?;
        train_from(&model.config, init, &cfg.train, &train_set, &val_set)?
    };
    model.params = out.params;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    }
    model.save(&a.out, Some(&cfg.train))?;
    if let Some(h) = &a.history {
        write_history_csv(h, &out.history)?;
    }
    println!(
        "{}",
        json!({ "checkpoint": a.out, "epochs": out.history.len(), "best_epoch": out.best_epoch, "stopped_early": out.stopped_early })
    );
    Ok(())
}

fn evaluate_cmd(cfg: &PipelineConfig, a: &EvalCmd) -> mer_core::Result<()> {
    let model = TrainedModel::load(&a.checkpoint)?;
    let manifest = read_manifest(&a.manifest)?;
    let split: Split = a.split.into();
    let samples = load_split(&manifest, split, &model, audio_source(a.audio, a.features.as_deref()), cfg.jobs)?;
    let report = evaluate(&model.config, &model.params, &samples, &split.to_string(), &cfg.eval)?;
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    }
    if let Some(p) = &a.confusion {
        write_confusion_csv(p, &report)?;
    }
    println!(
        "{}",
        json!({ "split": split.to_string(), "n": samples.len(), "accuracy": report.accuracy, "ci_low": report.ci_low, "ci_high": report.ci_high })
    );
    Ok(())
}

fn checkpoint_path(dir: &Path, mode: BenchMode) -> PathBuf {
    dir.join(format!("{mode}.emck"))
}

fn benchmark_cmd(cfg: &PipelineConfig, a: &BenchCmd) -> mer_core::Result<()> {
    let modes = a.mode_list()?;
    let mut models = Vec::new();
    for mode in modes {
        let p = checkpoint_path(&a.checkpoints, mode);
        if p.exists() {
            models.push((mode, TrainedModel::load(&p)?));
        } else if a.modes == "all" {
            warn!("no checkpoint for {mode} at {}", p.display());
        } else {
            return Err(missing(&p));
        }
    }
    if models.is_empty() {
        return Err(Error::InvalidArgument(format!("no benchmark checkpoints in {}", a.checkpoints.display())));
    }
    let rate = models[0].1.mel.sample_rate_hz;
    let (rooms, bad) = ingest_external_rirs(&a.rooms, rate)?;
    for (p, e) in &bad {
        warn!("skipping {}: {e}", p.display());
    }
    let manifest = read_manifest(&a.manifest)?;
    let refs: Vec<(BenchMode, &TrainedModel)> = models.iter().map(|(m, t)| (*m, t)).collect();
    let reports = benchmark_rooms(&refs, &manifest, &rooms, &cfg.eval, cfg.jobs)?;
    write_reports_csv(&a.out, &reports)?;
    if let Some(p) = &a.json {
        write_reports_json(p, &reports)?;
    }
    println!("{}", json!({ "rows": reports.len(), "rooms": rooms.len(), "out": a.out }));
    Ok(())
}

fn export_cmd(cfg: &PipelineConfig, a: &EmbedCmd) -> mer_core::Result<()> {
    let model = TrainedModel::load(&a.checkpoint)?;
    let manifest = read_manifest(&a.manifest)?;
    let samples = load_split(&manifest, a.split.into(), &model, audio_source(a.audio, a.features.as_deref()), cfg.jobs)?;
    let rows = export_embeddings(&model.config, &model.params, &samples, a.kind.into(), cfg.eval.batch_size)?;
    write_embeddings_csv(&a.out, &rows)?;
    println!("{}", json!({ "rows": rows.len(), "dim": rows.first().map_or(0, |r| r.2.len()), "out": a.out }));
    Ok(())
}
