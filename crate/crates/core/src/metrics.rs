//! Confusion matrices, correctness metrics and evaluation reports.
//!
//! The positive class is a correct trace (label 1).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::TraceDataset;
use crate::model::{Classification, Label};

pub const F_BETA: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("gold and predicted label sequences differ in length ({gold} vs {predicted})")]
    LengthMismatch { gold: usize, predicted: usize },
    #[error("label {0} is outside {{0, 1}}")]
    InvalidLabel(u8),
    #[error("confusion matrix is empty")]
    Empty,
    #[error("gold records without a label: {}", .0.join(", "))]
    UnlabeledGold(Vec<String>),
    #[error("duplicate prediction for trace {0}")]
    DuplicatePrediction(String),
    #[error("prediction ids do not match gold ids; missing predictions: [{}]; unknown predictions: [{}]", .missing.join(", "), .unknown.join(", "))]
    IdMismatch {
        missing: Vec<String>,
        unknown: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn record(&mut self, gold: Label, predicted: Label) {
        match (gold, predicted) {
            (Label::Correct, Label::Correct) => self.tp += 1,
            (Label::Correct, Label::Incorrect) => self.fn_ += 1,
            (Label::Incorrect, Label::Incorrect) => self.tn += 1,
            (Label::Incorrect, Label::Correct) => self.fp += 1,
        }
    }

    pub fn from_labels(gold: &[Label], predicted: &[Label]) -> Result<ConfusionMatrix, MetricsError> {
        if gold.len() != predicted.len() {
            return Err(MetricsError::LengthMismatch {
                gold: gold.len(),
                predicted: predicted.len(),
            });
        }
        let mut cm = ConfusionMatrix::default();
        for (g, p) in gold.iter().zip(predicted) {
            cm.record(*g, *p);
        }
        Ok(cm)
    }

    /// Same as [`ConfusionMatrix::from_labels`] over raw 0/1 values.
    pub fn from_bits(gold: &[u8], predicted: &[u8]) -> Result<ConfusionMatrix, MetricsError> {
        let to_labels = |bits: &[u8]| -> Result<Vec<Label>, MetricsError> {
            bits.iter()
                .map(|b| Label::from_bit(*b).ok_or(MetricsError::InvalidLabel(*b)))
                .collect()
        };
        ConfusionMatrix::from_labels(&to_labels(gold)?, &to_labels(predicted)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub specificity: f64,
    pub recall: f64,
    pub precision: f64,
    pub balanced_accuracy: f64,
    pub f_beta: f64,
    pub beta: f64,
    /// Metrics whose denominator was zero and which were set to 0.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub degenerate: BTreeSet<String>,
}

fn ratio(num: u64, den: u64, name: &str, degenerate: &mut BTreeSet<String>) -> f64 {
    if den == 0 {
        degenerate.insert(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(cm: ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    if cm.total() == 0 {
        return Err(MetricsError::Empty);
    }
    let mut degenerate = BTreeSet::new();
    let specificity = ratio(cm.tn, cm.fp + cm.tn, "specificity", &mut degenerate);
    let recall = ratio(cm.tp, cm.tp + cm.fn_, "recall", &mut degenerate);
    let precision = ratio(cm.tp, cm.tp + cm.fp, "precision", &mut degenerate);
    let b2 = F_BETA * F_BETA;
    let den = b2 * precision + recall;
    let f_beta = if den == 0.0 {
        degenerate.insert("f_beta".to_string());
        0.0
    } else {
        (1.0 + b2) * precision * recall / den
    };
    Ok(MetricsReport {
        confusion: cm,
        specificity,
        recall,
        precision,
        balanced_accuracy: (specificity + recall) / 2.0,
        f_beta,
        beta: F_BETA,
        degenerate,
    })
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

impl MetricsReport {
    /// Copy with every metric rounded to six decimals, for machine output.
    pub fn rounded(&self) -> MetricsReport {
        MetricsReport {
            specificity: round6(self.specificity),
            recall: round6(self.recall),
            precision: round6(self.precision),
            balanced_accuracy: round6(self.balanced_accuracy),
            f_beta: round6(self.f_beta),
            ..self.clone()
        }
    }
}

/// Gold and predicted labels aligned in gold order. Every gold record needs a
/// label and exactly one prediction, and no prediction may be unknown.
pub fn join_predictions(
    gold: &TraceDataset,
    predictions: &[Classification],
) -> Result<(Vec<Label>, Vec<Label>), MetricsError> {
    let unlabeled: Vec<String> = gold
        .records
        .iter()
        .filter(|r| r.label.is_none())
        .map(|r| r.id.clone())
        .collect();
    if !unlabeled.is_empty() {
        return Err(MetricsError::UnlabeledGold(unlabeled));
    }
    let mut by_id: BTreeMap<&str, Label> = BTreeMap::new();
    for p in predictions {
        if by_id.insert(p.trace_id.as_str(), p.predicted).is_some() {
            return Err(MetricsError::DuplicatePrediction(p.trace_id.clone()));
        }
    }
    let missing: Vec<String> = gold
        .records
        .iter()
        .filter(|r| !by_id.contains_key(r.id.as_str()))
        .map(|r| r.id.clone())
        .collect();
    let unknown: Vec<String> = by_id
        .keys()
        .filter(|id| gold.get(id).is_none())
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(MetricsError::IdMismatch { missing, unknown });
    }
    Ok(gold
        .records
        .iter()
        .map(|r| (r.label.expect("checked above"), by_id[r.id.as_str()]))
        .unzip())
}

/// Evaluation output: counts, metrics and the configuration that produced
/// the predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub traces: usize,
    pub metrics: MetricsReport,
    #[serde(default)]
    pub config: Value,
}

pub fn evaluate(
    gold: &TraceDataset,
    predictions: &[Classification],
    config: Value,
) -> Result<EvalReport, MetricsError> {
    let (g, p) = join_predictions(gold, predictions)?;
    let metrics = compute_metrics(ConfusionMatrix::from_labels(&g, &p)?)?;
    Ok(EvalReport {
        traces: g.len(),
        metrics: metrics.rounded(),
        config,
    })
}

/// Table rows of balanced accuracy, specificity and F0.5 to three decimals.
pub fn metrics_table<'a>(
    rows: impl IntoIterator<Item = (&'a str, Option<&'a MetricsReport>)>,
) -> Result<String, csv::Error> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["configuration", "BA", "S", "F0.5"])?;
    for (name, report) in rows {
        match report {
            Some(m) => writer.write_record([
                name.to_string(),
                format!("{:.3}", m.balanced_accuracy),
                format!("{:.3}", m.specificity),
                format!("{:.3}", m.f_beta),
            ])?,
            None => writer.write_record([name, "failed", "failed", "failed"])?,
        }
    }
    let bytes = writer.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
