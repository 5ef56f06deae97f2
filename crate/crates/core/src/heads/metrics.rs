use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of samples labelled with this class.
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub per_class: Vec<ClassScores>,
    /// Mean F1 over classes present in the labels.
    pub macro_f1: f64,
}

fn check_pairs(preds: &[usize], labels: &[usize], classes: usize) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Config("metrics need at least one sample".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(&c) = preds.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(Error::Config(format!("class {c} outside 0..{classes}")));
    }
    Ok(())
}

pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> Result<F1Report> {
    check_pairs(preds, labels, classes)?;
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        predicted[p] += 1;
        support[l] += 1;
        if p == l {
            tp[p] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassScores> = (0..classes)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support: support[c],
            }
        })
        .collect();
    let present: Vec<f64> = per_class
        .iter()
        .filter(|s| s.support > 0)
        .map(|s| s.f1)
        .collect();
    let macro_f1 = present.iter().sum::<f64>() / present.len() as f64;
    Ok(F1Report {
        per_class,
        macro_f1,
    })
}

/// Fraction of samples whose label ranks within the `k` largest logits.
/// Equal logits rank the lower class index first.
pub fn topk_accuracy(logits: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut hits = 0;
    for (row, &label) in logits.iter().zip(labels) {
        if k == 0 || k > row.len() {
            return Err(Error::Config(format!(
                "top-{k} requested for {} classes",
                row.len()
            )));
        }
        if label >= row.len() {
            return Err(Error::Config(format!(
                "class {label} outside 0..{}",
                row.len()
            )));
        }
        let ahead = row
            .iter()
            .enumerate()
            .filter(|&(c, &v)| v > row[label] || (v == row[label] && c < label))
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

/// Row-normalized confusion matrix, rows = ground truth, columns = predicted.
pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<Vec<Vec<f64>>> {
    check_pairs(preds, labels, classes)?;
    let mut m = vec![vec![0.0; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1.0;
    }
    for row in &mut m {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    Ok(m)
}

/// Scores of one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassScores>,
    pub confusion: Vec<Vec<f64>>,
}

impl HeadMetrics {
    pub fn compute(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        let f1 = macro_f1(preds, labels, classes)?;
        let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(HeadMetrics {
            accuracy: correct as f64 / labels.len() as f64,
            macro_f1: f1.macro_f1,
            per_class: f1.per_class,
            confusion: confusion_matrix(preds, labels, classes)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub mean_loss: f64,
    pub subactivity: HeadMetrics,
    pub affordance: HeadMetrics,
    /// Subactivity top-k accuracy keyed `top{k}`.
    pub topk: BTreeMap<String, f64>,
}
