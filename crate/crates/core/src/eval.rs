//! Metrics against gold labels and per-group summaries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} predictions vs {1} gold labels")]
    LengthMismatch(usize, usize),
    #[error("nothing to evaluate")]
    Empty,
    #[error("gold labels contain no positives")]
    NoPositives,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    /// `None` when nothing was predicted positive.
    pub precision: Option<f64>,
    /// `None` when gold has no positives.
    pub sensitivity: Option<f64>,
    pub f1: f64,
}

pub fn confusion(pred: &[bool], gold: &[bool]) -> Result<ConfusionMetrics, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gold) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let sensitivity = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(r)) if tp > 0 => 2.0 * p * r / (p + r),
        _ => 0.0,
    };
    Ok(ConfusionMetrics {
        tp,
        fp,
        fn_,
        tn,
        precision,
        sensitivity,
        f1,
    })
}

/// Step-wise average precision. Scores are visited in descending order and
/// each block of tied scores is one threshold step.
pub fn auprc(scores: &[f64], gold: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != gold.len() {
        return Err(EvalError::LengthMismatch(scores.len(), gold.len()));
    }
    let positives = gold.iter().filter(|&&g| g).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        while i < order.len() && scores[order[i]] == value {
            if gold[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        if recall > prev_recall {
            ap += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
            prev_recall = recall;
        }
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub topic: String,
    pub occurrence_rate: f64,
    pub mean_score: f64,
    pub count: usize,
}

/// Occurrence rate and mean score (negatives contribute 0) per group, sorted
/// by group name. Groups with no texts never appear.
pub fn group_summary(
    topic: &str,
    labels: &[bool],
    scores: &[f64],
    groups: &[&str],
) -> Result<Vec<GroupSummary>, EvalError> {
    if labels.len() != groups.len() || scores.len() != groups.len() {
        return Err(EvalError::LengthMismatch(labels.len(), groups.len()));
    }
    let mut acc: BTreeMap<&str, (usize, usize, f64)> = BTreeMap::new();
    for ((&label, &score), &group) in labels.iter().zip(scores).zip(groups) {
        let e = acc.entry(group).or_default();
        e.0 += 1;
        e.1 += usize::from(label);
        e.2 += score;
    }
    Ok(acc
        .into_iter()
        .map(|(group, (count, pos, sum))| GroupSummary {
            group: group.to_string(),
            topic: topic.to_string(),
            occurrence_rate: pos as f64 / count as f64,
            mean_score: sum / count as f64,
            count,
        })
        .collect())
}

/// One rater (a model or an ensemble) to compare against gold.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub name: String,
    pub labels: Vec<bool>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub candidate: String,
    pub metrics: ConfusionMetrics,
    /// `None` when gold has no positives.
    pub auprc: Option<f64>,
}

/// Label metrics and score AUPRC for each candidate, sorted by name.
pub fn compare_raters(candidates: &[Candidate], gold: &[bool]) -> Result<Vec<ComparisonRow>, EvalError> {
    let mut rows = candidates
        .iter()
        .map(|c| {
            let metrics = confusion(&c.labels, gold)?;
            let auprc = match auprc(&c.scores, gold) {
                Ok(v) => Some(v),
                Err(EvalError::NoPositives) => None,
                Err(e) => return Err(e),
            };
            Ok(ComparisonRow {
                candidate: c.name.clone(),
                metrics,
                auprc,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    rows.sort_by(|a, b| a.candidate.cmp(&b.candidate));
    Ok(rows)
}

/// All subsets of `models` with at least `min_size` members, by size then
/// lexicographic position.
pub fn model_subsets(models: &[String], min_size: usize) -> Vec<Vec<String>> {
    let n = models.len();
    let mut out: Vec<Vec<usize>> = (1u64..(1u64 << n))
        .map(|mask| (0..n).filter(|i| mask & (1 << i) != 0).collect::<Vec<_>>())
        .filter(|s| s.len() >= min_size)
        .collect();
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    out.into_iter()
        .map(|s| s.into_iter().map(|i| models[i].clone()).collect())
        .collect()
}
