use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::data::{batch_input, Sample};
use crate::error::{Error, Result};
use crate::fusion::argmax;
use crate::model::{forward, ModelConfig};
use crate::nn::{Graph, ParamStore};
use crate::rng::{self, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub ci_level: f64,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            ci_level: 0.75,
            bootstrap_resamples: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub utterance_id: String,
    pub label: usize,
    pub predicted: usize,
    /// Cross-entropy of this utterance.
    pub loss: f64,
}

impl Prediction {
    pub fn correct(&self) -> bool {
        self.label == self.predicted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub condition: String,
    pub accuracy: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Row-normalized percentages, rows are true classes.
    pub confusion: Vec<Vec<f64>>,
    /// Classes with no utterance in the evaluated set; their rows are zero.
    pub absent_classes: Vec<usize>,
    pub predictions: Vec<Prediction>,
}

fn log_softmax_at(logits: &[f32], k: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let lse = logits.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
    logits[k] as f64 - lse
}

/// Deterministic forward pass over `samples` in evaluation mode.
pub fn predict(model: &ModelConfig, params: &ParamStore, samples: &[Sample], cfg: &EvalConfig) -> Result<Vec<Prediction>> {
    let k = model.head.class_count;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::<f32>::new();
        let bound = params.bind_frozen(&mut g);
        let o = forward(&mut g, &bound, model, batch_input(model, &batch, None)?)?;
        let logits = g.value(o.logits);
        for (i, s) in chunk.iter().enumerate() {
            let row = &logits[i * k..(i + 1) * k];
            out.push(Prediction {
                utterance_id: s.id.clone(),
                label: s.label,
                predicted: argmax(row),
                loss: -log_softmax_at(row, s.label),
            });
        }
    }
    Ok(out)
}

/// Row-percentage confusion matrix and the classes absent from `labels`.
pub fn confusion_matrix(labels: &[usize], predicted: &[usize], classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut counts = vec![vec![0usize; classes]; classes];
    for (&l, &p) in labels.iter().zip(predicted) {
        counts[l][p] += 1;
    }
    let mut absent = Vec::new();
    let rows = counts
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                absent.push(c);
                return vec![0.0; classes];
            }
            row.iter().map(|&x| 100.0 * x as f64 / n as f64).collect()
        })
        .collect();
    (rows, absent)
}

/// Linear interpolation between order statistics of sorted `v`.
fn quantile(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval of the accuracy; resample `b` draws from
/// its own seed derived from `seed`.
pub fn bootstrap_ci(correct: &[bool], level: f64, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if correct.is_empty() {
        return Err(Error::InvalidArgument("bootstrap of an empty list".into()));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::InvalidArgument(format!("bootstrap level {level} with {resamples} resamples")));
    }
    let n = correct.len();
    let mut acc: Vec<f64> = (0..resamples)
        .map(|b| {
            let mut r = rng::rng(derive_seed(seed, b as u64));
            let hits = (0..n).filter(|_| correct[r.random_range(0..n)]).count();
            hits as f64 / n as f64
        })
        .collect();
    acc.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok((quantile(&acc, tail), quantile(&acc, 1.0 - tail)))
}

pub fn evaluate(model: &ModelConfig, params: &ParamStore, samples: &[Sample], condition: &str, cfg: &EvalConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit(condition.to_string()));
    }
    let predictions = predict(model, params, samples, cfg)?;
    let correct: Vec<bool> = predictions.iter().map(Prediction::correct).collect();
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / correct.len() as f64;
    let (lo, hi) = bootstrap_ci(&correct, cfg.ci_level, cfg.bootstrap_resamples, cfg.seed)?;
    let labels: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    let preds: Vec<usize> = predictions.iter().map(|p| p.predicted).collect();
    let (confusion, absent_classes) = confusion_matrix(&labels, &preds, model.head.class_count);
    if !absent_classes.is_empty() {
        log::warn!("{condition}: classes {absent_classes:?} absent from the evaluated set");
    }
    Ok(EvalReport {
        condition: condition.to_string(),
        accuracy,
        // Percentile intervals can exclude the point estimate on tiny sets.
        ci_low: lo.min(accuracy),
        ci_high: hi.max(accuracy),
        confusion,
        absent_classes,
        predictions,
    })
}

pub fn write_confusion_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let k = report.confusion.len();
    let mut s = String::from("true\\predicted");
    for c in 0..k {
        s.push_str(&format!(",{c}"));
    }
    s.push('\n');
    for (c, row) in report.confusion.iter().enumerate() {
        s.push_str(&c.to_string());
        for v in row {
            s.push_str(&format!(",{v:.4}"));
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Audio,
    Video,
    /// The head input: the fused vector, or the single embedding.
    Fused,
}

/// Per-utterance embeddings `(id, label, values)` in sample order.
pub fn export_embeddings(
    model: &ModelConfig,
    params: &ParamStore,
    samples: &[Sample],
    kind: EmbeddingKind,
    batch_size: usize,
) -> Result<Vec<(String, usize, Vec<f32>)>> {
    let mut rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let mut g = Graph::<f32>::new();
        let bound = params.bind_frozen(&mut g);
        let o = forward(&mut g, &bound, model, batch_input(model, &batch, None)?)?;
        let var = match kind {
            EmbeddingKind::Audio => o.audio.ok_or_else(|| Error::InvalidArgument("model has no audio encoder".into()))?,
            EmbeddingKind::Video => o.video.ok_or_else(|| Error::InvalidArgument("model has no video encoder".into()))?,
            EmbeddingKind::Fused => o.features,
        };
        let dim = g.shape(var)[1];
        let values = g.value(var);
        for (i, s) in chunk.iter().enumerate() {
            rows.push((s.id.clone(), s.label, values[i * dim..(i + 1) * dim].to_vec()));
        }
    }
    Ok(rows)
}

/// Columns: `utterance_id,label,e0..e{n-1}`.
pub fn write_embeddings_csv(path: &Path, rows: &[(String, usize, Vec<f32>)]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.2.len());
    let mut s = String::from("utterance_id,label");
    for i in 0..dim {
        s.push_str(&format!(",e{i}"));
    }
    s.push('\n');
    for (id, label, values) in rows {
        s.push_str(id);
        s.push_str(&format!(",{label}"));
        for v in values {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
