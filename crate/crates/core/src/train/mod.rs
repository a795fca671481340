//! Training loop with warm-up and early stopping, evaluation, per-room
//! benchmarking and embedding export.

mod bench;
mod data;
mod eval;
pub mod toy;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{MelConfig, SpecAugmentConfig};
use crate::model::{forward, ModelConfig};
use crate::nn::{checkpoint, AdamConfig, Graph, ParamStore};
use crate::rng::{self, derive_seed, derive_seed_str};

pub use bench::{benchmark_rooms, write_reports_csv, write_reports_json, BenchMode, RoomReport};
pub(crate) use data::load_audio;
pub use data::{batch_input, load_samples, AudioSource, LoadSpec, Sample};
pub use eval::{
    bootstrap_ci, confusion_matrix, evaluate, export_embeddings, predict, write_confusion_csv, write_embeddings_csv, EmbeddingKind, EvalConfig,
    EvalReport, Prediction,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup_steps: u64,
    pub seed: u64,
    /// SpecAugment on training log-mels.
    pub spec_augment: Option<SpecAugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 500,
            patience: 12,
            warmup_steps: 500,
            seed: 0,
            spec_augment: Some(SpecAugmentConfig::default()),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config { key: "train".into(), msg: msg.into() });
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be positive");
        }
        if self.patience >= self.max_epochs {
            return bad("patience must be smaller than max_epochs");
        }
        Ok(())
    }
}

/// Learning rate for optimizer step `step` (1-based): linear ramp from 0 to
/// `lr` over `warmup_steps`, then constant.
pub fn warmup_lr(lr: f64, warmup_steps: u64, step: u64) -> f64 {
    if warmup_steps == 0 {
        return lr;
    }
    lr * (step as f64 / warmup_steps as f64).min(1.0)
}

/// Counts epochs without strict improvement of the monitored loss.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records an epoch; returns whether it improved on the best so far.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub params: ParamStore,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// A model architecture, its feature settings and trained parameters.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub mel: MelConfig,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    model: ModelConfig,
    mel: MelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
}

impl TrainedModel {
    pub fn save(&self, path: &Path, train: Option<&TrainConfig>) -> Result<()> {
        let meta = CheckpointMeta {
            model: self.config.clone(),
            mel: self.mel.clone(),
            train: train.cloned(),
        };
        checkpoint::save_checkpoint(path, &self.params, &serde_json::to_string(&meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load_checkpoint(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&ck.config_json)?;
        meta.model.validate()?;
        Ok(Self {
            config: meta.model,
            mel: meta.mel,
            params: ck.params,
        })
    }
}

/// Sets the audio encoder's input standardization from `samples`' log-mels.
pub fn fit_input_norm(model: &mut ModelConfig, samples: &[Sample]) -> Result<()> {
    if let Some(audio) = model.audio.as_mut() {
        let (mean, std) = crate::audio_encoder::fit_input_norm(samples.iter().filter_map(|s| s.mel.as_ref()))?;
        audio.input_mean = mean;
        audio.input_std = std;
    }
    Ok(())
}

/// Trains from freshly initialized parameters.
pub fn train(model: &ModelConfig, tc: &TrainConfig, train_set: &[Sample], val_set: &[Sample]) -> Result<TrainOutcome> {
    let params = model.init_params(derive_seed_str(tc.seed, "init"))?;
    train_from(model, params, tc, train_set, val_set)
}

/// Fresh parameters for `model` with its encoders copied from trained
/// models sharing the same encoder configuration. The head stays random.
pub fn warm_start(model: &ModelConfig, seed: u64, sources: &[&TrainedModel]) -> Result<ParamStore> {
    let mut params = model.init_params(derive_seed_str(seed, "init"))?;
    for src in sources {
        let mut copied = false;
        if let (Some(a), Some(b)) = (&model.audio, &src.config.audio) {
            if a != b {
                return Err(Error::InvalidArgument("audio encoder configuration differs from the source model".into()));
            }
            params.copy_prefix(&src.params, "audio.")?;
            copied = true;
        }
        if let (Some(a), Some(b)) = (&model.video, &src.config.video) {
            if a != b {
                return Err(Error::InvalidArgument("video encoder configuration differs from the source model".into()));
            }
            params.copy_prefix(&src.params, "video.")?;
            copied = true;
        }
        if !copied {
            return Err(Error::InvalidArgument("source model shares no encoder with the target".into()));
        }
    }
    Ok(params)
}

/// Trains starting from `params` (fine-tuning when they are pre-trained).
pub fn train_from(model: &ModelConfig, mut params: ParamStore, tc: &TrainConfig, train_set: &[Sample], val_set: &[Sample]) -> Result<TrainOutcome> {
    tc.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if val_set.is_empty() {
        return Err(Error::EmptySplit("val".into()));
    }
    let eval_cfg = EvalConfig {
        batch_size: tc.batch_size,
        ..EvalConfig::default()
    };
    let mut stopper = EarlyStopper::new(tc.patience);
    let mut best = params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopped_early = false;
    for epoch in 1..=tc.max_epochs {
        let epoch_seed = derive_seed(tc.seed, epoch as u64);
        order.shuffle(&mut rng::rng(derive_seed_str(epoch_seed, "shuffle")));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, idx) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let input = batch_input(model, &batch, Some((tc, epoch_seed)))?;
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut g = Graph::<f32>::new();
            let bound = params.bind(&mut g);
            let out = forward(&mut g, &bound, model, input)?;
            let loss = g.cross_entropy(out.logits, &labels)?;
            let value = g.value(loss)[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, batch {b}")));
            }
            g.backward(loss)?;
            params.zero_grads();
            params.collect_grads(&g, &bound);
            lr = warmup_lr(tc.lr, tc.warmup_steps, params.step() + 1);
            params.adam_step(&AdamConfig { lr, ..AdamConfig::default() })?;
            loss_sum += value * batch.len() as f64;
        }
        let preds = predict(model, &params, val_set, &eval_cfg)?;
        let val_loss = preds.iter().map(|p| p.loss).sum::<f64>() / preds.len() as f64;
        let val_accuracy = preds.iter().filter(|p| p.correct()).count() as f64 / preds.len() as f64;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_accuracy,
            lr,
        });
        log::info!("epoch {epoch}: train {:.4} val {val_loss:.4} acc {val_accuracy:.3}", loss_sum / train_set.len() as f64);
        if stopper.observe(epoch, val_loss) {
            best = params.clone();
        }
        if stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch: stopper.best().map_or(0, |(e, _)| e),
        stopped_early,
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_loss,val_accuracy,lr\n");
    for r in history {
        s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.lr));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}
