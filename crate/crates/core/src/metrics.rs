//! Confusion matrices, per-class and macro precision/recall/F1, and the
//! report, confusion and prediction files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::data::Dataset;
use crate::model::{predict_logits, ArchConfig, EmotionLabel, ModelError, ModelParams};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("label and prediction lists differ or are empty ({truth} vs {pred})")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("confusion matrix has no counts")]
    EmptyMatrix,
    #[error("cannot evaluate an empty split")]
    EmptySplit,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self, MetricsError> {
        let c = counts.len();
        if let Some(row) = counts.iter().find(|r| r.len() != c) {
            return Err(MetricsError::LengthMismatch {
                truth: c,
                pred: row.len(),
            });
        }
        Ok(Self { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn to_csv(&self, labels: &[&str]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["true\\pred".to_string()];
        header.extend(labels.iter().map(|s| s.to_string()));
        w.write_record(&header).expect("in-memory write");
        for (label, row) in labels.iter().zip(&self.counts) {
            let mut rec = vec![label.to_string()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(MetricsError::LengthMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if let Some(&label) = [t, p].iter().find(|&&l| l >= n_classes) {
            return Err(MetricsError::LabelOutOfRange {
                label,
                classes: n_classes,
            });
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub n_samples: u64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: ClassMetrics,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall and F1 per class (0 where undefined), their unweighted
/// means, and accuracy = trace / total.
pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let c = cm.n_classes();
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = cm.counts[k][k];
            let predicted: u64 = (0..c).map(|i| cm.counts[i][k]).sum();
            let actual: u64 = cm.counts[k].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics { precision, recall, f1 }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    let macro_avg = ClassMetrics {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        n_samples: total,
        per_class,
        macro_avg,
        confusion: cm.clone(),
    })
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

fn class_json(m: &ClassMetrics, round: bool) -> Value {
    let f = |v: f64| if round { round4(v) } else { v };
    json!({"precision": f(m.precision), "recall": f(m.recall), "f1": f(m.f1)})
}

impl MetricsReport {
    /// JSON with 4-decimal display fields and full-precision values under `raw`.
    pub fn to_json(&self, labels: &[&str]) -> Value {
        let per_class = |round: bool| {
            let mut m = Map::new();
            for (name, c) in labels.iter().zip(&self.per_class) {
                m.insert(name.to_string(), class_json(c, round));
            }
            Value::Object(m)
        };
        json!({
            "accuracy": round4(self.accuracy),
            "n_samples": self.n_samples,
            "per_class": per_class(true),
            "macro": class_json(&self.macro_avg, true),
            "confusion": self.confusion.counts,
            "raw": {
                "accuracy": self.accuracy,
                "per_class": per_class(false),
                "macro": class_json(&self.macro_avg, false),
            }
        })
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax of `[N, C]` logits.
pub fn softmax_rows(logits: &[f64], c: usize) -> Vec<f64> {
    logits
        .chunks(c)
        .flat_map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(move |e| e / total)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub truth: usize,
    pub pred: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    /// Mean cross-entropy over the split.
    pub loss: f64,
}

/// Eval-mode predictions for every item, in dataset order.
pub fn evaluate(
    params: &ModelParams,
    arch: &ArchConfig,
    data: &Dataset,
    batch_size: usize,
) -> Result<Evaluation, MetricsError> {
    if data.is_empty() {
        return Err(MetricsError::EmptySplit);
    }
    let c = arch.n_classes;
    let mut predictions = Vec::with_capacity(data.len());
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let logits = predict_logits(params, arch, &x)?;
        let probs = softmax_rows(logits.data(), c);
        for (k, (&i, &truth)) in chunk.iter().zip(&labels).enumerate() {
            let p = probs[k * c..(k + 1) * c].to_vec();
            let row = &logits.data()[k * c..(k + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[truth];
            predictions.push(Prediction {
                id: data.ids[i].clone(),
                truth,
                pred: argmax(row),
                probs: p,
            });
        }
    }
    let truth: Vec<usize> = predictions.iter().map(|p| p.truth).collect();
    let pred: Vec<usize> = predictions.iter().map(|p| p.pred).collect();
    let report = report(&confusion(&truth, &pred, c)?)?;
    Ok(Evaluation {
        report,
        predictions,
        loss: loss / data.len() as f64,
    })
}

pub fn label_names() -> Vec<&'static str> {
    EmotionLabel::ALL.iter().map(|l| l.name()).collect()
}

/// `path,true,pred,p_anger,p_happiness,p_sadness,p_neutral`.
pub fn predictions_csv(preds: &[Prediction]) -> String {
    let names = label_names();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["path".to_string(), "true".into(), "pred".into()];
    header.extend(names.iter().map(|n| format!("p_{n}")));
    w.write_record(&header).expect("in-memory write");
    for p in preds {
        let mut rec = vec![p.id.clone(), names[p.truth].to_string(), names[p.pred].to_string()];
        rec.extend(p.probs.iter().map(|v| v.to_string()));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Write `report.json`, `confusion.csv` and `predictions.csv` into `dir`.
pub fn write_reports(dir: &Path, eval: &Evaluation) -> Result<(), MetricsError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| MetricsError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let names = label_names();
    let files = [
        (
            "report.json",
            serde_json::to_string_pretty(&eval.report.to_json(&names)).expect("json values") + "\n",
        ),
        ("confusion.csv", eval.report.confusion.to_csv(&names)),
        ("predictions.csv", predictions_csv(&eval.predictions)),
    ];
    for (name, body) in files {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(io(&p))?;
    }
    Ok(())
}
