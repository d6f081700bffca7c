//! Attribute classification metrics: confusion matrices, top-k accuracy and macro P/R/F1.

use serde::{Deserialize, Serialize};

use crate::data::AttributeSchema;
use crate::error::{MmflError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub name: String,
    /// Rows are actual values, columns predicted values.
    pub confusion: Vec<Vec<usize>>,
    pub support: usize,
    pub accuracy: f64,
    pub top_k: usize,
    pub top_k_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn in_top_k(scores: &[f64], target: usize, k: usize) -> bool {
    let t = scores[target];
    let better = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < target))
        .count();
    better < k
}

/// Metrics of one attribute type from per-sample value scores; samples without a target are skipped.
pub fn type_metrics(name: &str, num_values: usize, scores: &[Vec<f64>], targets: &[Option<usize>], top_k: usize) -> Result<TypeMetrics> {
    if scores.len() != targets.len() {
        return Err(MmflError::Shape(format!(
            "{} predictions but {} targets for {name}",
            scores.len(),
            targets.len()
        )));
    }
    let mut confusion = vec![vec![0usize; num_values]; num_values];
    let mut support = 0;
    let mut top_hits = 0;
    for (s, t) in scores.iter().zip(targets) {
        let Some(t) = *t else { continue };
        if s.len() != num_values || t >= num_values {
            return Err(MmflError::Shape(format!(
                "{name} has {num_values} values; got {} scores and target {t}",
                s.len()
            )));
        }
        confusion[t][argmax(s)] += 1;
        support += 1;
        if in_top_k(s, t, top_k) {
            top_hits += 1;
        }
    }
    let correct: usize = (0..num_values).map(|i| confusion[i][i]).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut f_sum = 0.0;
    let mut classes = 0;
    for c in 0..num_values {
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        if actual == 0 && predicted == 0 {
            continue;
        }
        classes += 1;
        let tp = confusion[c][c];
        let p = ratio(tp, predicted);
        let r = ratio(tp, actual);
        p_sum += p;
        r_sum += r;
        f_sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let avg = |x: f64| if classes == 0 { 0.0 } else { x / classes as f64 };
    Ok(TypeMetrics {
        name: name.to_string(),
        confusion,
        support,
        accuracy: ratio(correct, support),
        top_k,
        top_k_accuracy: ratio(top_hits, support),
        macro_precision: avg(p_sum),
        macro_recall: avg(r_sum),
        macro_f1: avg(f_sum),
    })
}

/// Per-type metrics; `scores[type][sample]` and `targets[type][sample]`.
pub fn attribute_metrics(
    scores: &[Vec<Vec<f64>>],
    targets: &[Vec<Option<usize>>],
    schema: &AttributeSchema,
    top_k: usize,
) -> Result<Vec<TypeMetrics>> {
    if scores.len() != schema.num_types() || targets.len() != schema.num_types() {
        return Err(MmflError::Shape(format!(
            "expected {} attribute types, got {} score and {} target lists",
            schema.num_types(),
            scores.len(),
            targets.len()
        )));
    }
    schema
        .types
        .iter()
        .enumerate()
        .map(|(t, ty)| type_metrics(&ty.name, ty.values.len(), &scores[t], &targets[t], top_k))
        .collect()
}

/// One-hot scores for hard predictions.
pub fn one_hot_scores(predictions: &[usize], num_values: usize) -> Vec<Vec<f64>> {
    predictions
        .iter()
        .map(|&p| (0..num_values).map(|v| if v == p { 1.0 } else { 0.0 }).collect())
        .collect()
}
