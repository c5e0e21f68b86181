//! Score and label fusion across models.
//!
//! Per topic: relevancy scores are projected onto their first principal
//! component, a threshold on that projection is chosen to best reproduce the
//! majority-vote label, and union positives below the threshold are demoted.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("score matrix needs at least {needed} {what}, got {got}")]
    TooSmall {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("row {row} has {got} columns, expected {expected}")]
    Ragged { row: usize, got: usize, expected: usize },
    #[error("score {value} at row {row} column {col} is not finite")]
    BadScore { row: usize, col: usize, value: f64 },
    #[error("every score column is constant")]
    ZeroVariance,
    #[error("input lengths differ: {0}")]
    LengthMismatch(String),
}

/// Relevancy scores for one topic: `values[text][model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    values: Vec<Vec<f64>>,
    models: usize,
}

impl ScoreMatrix {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self, EnsembleError> {
        if values.len() < 2 {
            return Err(EnsembleError::TooSmall {
                what: "texts",
                needed: 2,
                got: values.len(),
            });
        }
        let models = values[0].len();
        if models < 2 {
            return Err(EnsembleError::TooSmall {
                what: "models",
                needed: 2,
                got: models,
            });
        }
        for (row, r) in values.iter().enumerate() {
            if r.len() != models {
                return Err(EnsembleError::Ragged {
                    row,
                    got: r.len(),
                    expected: models,
                });
            }
            for (col, &value) in r.iter().enumerate() {
                if !value.is_finite() {
                    return Err(EnsembleError::BadScore { row, col, value });
                }
            }
        }
        Ok(Self { values, models })
    }

    pub fn texts(&self) -> usize {
        self.values.len()
    }

    pub fn models(&self) -> usize {
        self.models
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j]).collect()
    }

    pub fn row_means(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|r| r.iter().sum::<f64>() / self.models as f64)
            .collect()
    }

    fn centered(&self) -> DMatrix<f64> {
        let n = self.texts();
        let m = DMatrix::from_fn(n, self.models, |i, j| self.values[i][j]);
        let means: Vec<f64> = (0..self.models).map(|j| m.column(j).mean()).collect();
        DMatrix::from_fn(n, self.models, |i, j| m[(i, j)] - means[j])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEnsemble {
    /// Unit-norm loadings, one per model column.
    pub weights: Vec<f64>,
    /// Projection of the centered scores, min-max rescaled to [0, 1].
    pub pc1: Vec<f64>,
    /// Projection before rescaling.
    pub raw_pc1: Vec<f64>,
    /// +1 if the eigenvector was kept as returned, -1 if it was flipped.
    pub orientation_sign: f64,
    /// Variance of the raw projection (the leading eigenvalue).
    pub explained_variance: f64,
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n
}

/// Variance (population normalization) of the centered projection `X w`.
pub fn projected_variance(m: &ScoreMatrix, weights: &[f64]) -> f64 {
    let proj: Vec<f64> = m
        .rows()
        .iter()
        .map(|r| r.iter().zip(weights).map(|(x, w)| x * w).sum())
        .collect();
    covariance(&proj, &proj)
}

/// Min-max rescale to [0, 1]; a constant vector maps to all zeros.
pub fn min_max_rescale(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

/// Leading principal component of the column covariance.
///
/// Columns are mean-centered but not standardized. The eigenvector sign is
/// fixed so the projection correlates non-negatively with the per-text mean
/// score.
pub fn pca_first_component(m: &ScoreMatrix) -> Result<ScoreEnsemble, EnsembleError> {
    let constant = (0..m.models()).all(|j| {
        let first = m.values[0][j];
        m.values.iter().all(|r| r[j] == first)
    });
    if constant {
        return Err(EnsembleError::ZeroVariance);
    }
    let centered = m.centered();
    let cov = (centered.transpose() * &centered) / m.texts() as f64;
    let eig = SymmetricEigen::new(cov);
    let (lead, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        });
    let vector = eig.eigenvectors.column(lead);
    let norm = vector.norm();
    let mut weights: Vec<f64> = vector.iter().map(|w| w / norm).collect();

    let project = |w: &[f64]| -> Vec<f64> {
        (0..m.texts())
            .map(|i| (0..m.models()).map(|j| centered[(i, j)] * w[j]).sum())
            .collect()
    };
    let mut raw_pc1 = project(&weights);
    let mut sign = 1.0;
    let agreement = covariance(&raw_pc1, &m.row_means());
    let flip = if agreement.abs() > 1e-15 {
        agreement < 0.0
    } else {
        weights.iter().sum::<f64>() < 0.0
    };
    if flip {
        sign = -1.0;
        weights.iter_mut().for_each(|w| *w = -*w);
        raw_pc1 = project(&weights);
    }
    let explained_variance = covariance(&raw_pc1, &raw_pc1);
    Ok(ScoreEnsemble {
        pc1: min_max_rescale(&raw_pc1),
        raw_pc1,
        weights,
        orientation_sign: sign,
        explained_variance,
    })
}

/// Majority vote: strictly more than half of the labels are positive.
pub fn intersection_label(labels: &[bool]) -> bool {
    let yes = labels.iter().filter(|&&l| l).count();
    yes * 2 > labels.len()
}

pub fn union_label(labels: &[bool]) -> bool {
    labels.iter().any(|&l| l)
}

/// One row of the threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `None` when nothing is predicted positive.
    pub precision: Option<f64>,
    /// `None` when the reference has no positives.
    pub sensitivity: Option<f64>,
    pub f1: f64,
}

impl SweepPoint {
    fn new(threshold: f64, tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
        let sensitivity = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
        Self {
            threshold,
            tp,
            fp,
            fn_,
            precision,
            sensitivity,
            f1: f1_from_counts(tp, fp, fn_),
        }
    }
}

/// `2TP / (2TP + FP + FN)`, zero when there are no true positives.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Candidate thresholds in ascending order: one below the minimum, the
/// midpoints between consecutive distinct values, one above the maximum.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut out = Vec::with_capacity(distinct.len() + 1);
    let Some((&lo, &hi)) = distinct.first().zip(distinct.last()) else {
        return vec![0.0];
    };
    out.push(lo - 1.0);
    out.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    out.push(hi + 1.0);
    out
}

/// Sweep every candidate threshold (positive iff `score >= threshold`) against
/// the reference labels and return the lowest threshold with maximal F1.
///
/// If the reference has no positives the above-maximum sentinel is returned.
pub fn optimal_threshold(
    scores: &[f64],
    reference: &[bool],
) -> Result<(f64, Vec<SweepPoint>), EnsembleError> {
    if scores.len() != reference.len() {
        return Err(EnsembleError::LengthMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            reference.len()
        )));
    }
    if scores.len() < 2 {
        return Err(EnsembleError::TooSmall {
            what: "texts",
            needed: 2,
            got: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = reference.iter().filter(|&&r| r).count();
    let candidates = threshold_candidates(scores);

    // Start with everything predicted positive and peel off one block of tied
    // scores per candidate.
    let mut sweep = Vec::with_capacity(candidates.len());
    let mut cursor = 0usize;
    let mut tp = positives;
    let mut fp = scores.len() - positives;
    for &threshold in &candidates {
        while cursor < order.len() && scores[order[cursor]] < threshold {
            if reference[order[cursor]] {
                tp -= 1;
            } else {
                fp -= 1;
            }
            cursor += 1;
        }
        sweep.push(SweepPoint::new(threshold, tp, fp, positives - tp));
    }

    let tau = if positives == 0 {
        *candidates.last().expect("at least two candidates")
    } else {
        let mut best = &sweep[0];
        for point in &sweep[1..] {
            if point.f1 > best.f1 {
                best = point;
            }
        }
        best.threshold
    };
    Ok((tau, sweep))
}

/// Demote union positives whose ensemble score is below `tau`.
pub fn fuse_labels(union: &[bool], pc1: &[f64], tau: f64) -> Result<Vec<bool>, EnsembleError> {
    if union.len() != pc1.len() {
        return Err(EnsembleError::LengthMismatch(format!(
            "{} labels vs {} scores",
            union.len(),
            pc1.len()
        )));
    }
    Ok(union.iter().zip(pc1).map(|(&u, &s)| u && s >= tau).collect())
}

/// Labels and scores of every model for one topic, row-major by text.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicInputs {
    pub topic: String,
    pub models: Vec<String>,
    pub text_ids: Vec<String>,
    /// `labels[text][model]`
    pub labels: Vec<Vec<bool>>,
    /// `scores[text][model]`
    pub scores: Vec<Vec<f64>>,
}

impl TopicInputs {
    /// Drop the columns of excluded models.
    pub fn without(&self, excluded: &BTreeSet<String>) -> TopicInputs {
        let keep: Vec<usize> = self
            .models
            .iter()
            .enumerate()
            .filter(|(_, m)| !excluded.contains(*m))
            .map(|(i, _)| i)
            .collect();
        let pick_b = |row: &Vec<bool>| keep.iter().map(|&j| row[j]).collect();
        let pick_f = |row: &Vec<f64>| keep.iter().map(|&j| row[j]).collect();
        TopicInputs {
            topic: self.topic.clone(),
            models: keep.iter().map(|&j| self.models[j].clone()).collect(),
            text_ids: self.text_ids.clone(),
            labels: self.labels.iter().map(pick_b).collect(),
            scores: self.scores.iter().map(pick_f).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub topic: String,
    pub models: Vec<String>,
    pub union_label: Vec<bool>,
    pub intersection_label: Vec<bool>,
    pub tau: f64,
    pub final_label: Vec<bool>,
    pub sweep: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicEnsemble {
    pub decision: EnsembleDecision,
    pub scores: ScoreEnsemble,
    /// Set when every score column was constant; the projection is then flat
    /// and the weights uniform.
    pub degenerate: bool,
}

/// Full per-topic fusion: filter excluded models, PCA, majority and union
/// labels, threshold sweep, demotion.
pub fn ensemble_topic(
    inputs: &TopicInputs,
    excluded: &BTreeSet<String>,
) -> Result<TopicEnsemble, EnsembleError> {
    let inputs = inputs.without(excluded);
    if inputs.labels.len() != inputs.text_ids.len() || inputs.scores.len() != inputs.text_ids.len()
    {
        return Err(EnsembleError::LengthMismatch("texts".into()));
    }
    let matrix = ScoreMatrix::new(inputs.scores.clone())?;
    let (scores, degenerate) = match pca_first_component(&matrix) {
        Ok(s) => (s, false),
        Err(EnsembleError::ZeroVariance) => {
            let m = matrix.models();
            let w = 1.0 / (m as f64).sqrt();
            let flat = vec![0.0; matrix.texts()];
            (
                ScoreEnsemble {
                    weights: vec![w; m],
                    pc1: flat.clone(),
                    raw_pc1: flat,
                    orientation_sign: 1.0,
                    explained_variance: 0.0,
                },
                true,
            )
        }
        Err(e) => return Err(e),
    };
    let union: Vec<bool> = inputs.labels.iter().map(|r| union_label(r)).collect();
    let intersection: Vec<bool> = inputs.labels.iter().map(|r| intersection_label(r)).collect();
    let (tau, sweep) = optimal_threshold(&scores.pc1, &intersection)?;
    let final_label = fuse_labels(&union, &scores.pc1, tau)?;
    Ok(TopicEnsemble {
        decision: EnsembleDecision {
            topic: inputs.topic.clone(),
            models: inputs.models.clone(),
            union_label: union,
            intersection_label: intersection,
            tau,
            final_label,
            sweep,
        },
        scores,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn matrix(cols: &[&[f64]]) -> ScoreMatrix {
        let n = cols[0].len();
        ScoreMatrix::new((0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect()).unwrap()
    }

    #[test]
    fn two_column_fixture() {
        // sample covariance [[1/3,1/3],[1/3,1]]; leading eigenvector ∝ (1, 1+√2)
        let m = matrix(&[&[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0, 0.0, 2.0]]);
        let e = pca_first_component(&m).unwrap();
        let expected = 1.0 / (1.0 + (1.0 + 2f64.sqrt()).powi(2)).sqrt();
        assert_abs_diff_eq!(e.weights[0], expected, epsilon = 1e-9);
        assert_abs_diff_eq!(e.weights[1], expected * (1.0 + 2f64.sqrt()), epsilon = 1e-9);
        assert_abs_diff_eq!(e.weights[0], 0.383, epsilon = 1e-3);
        assert_abs_diff_eq!(e.weights[1], 0.924, epsilon = 1e-3);
    }

    #[test]
    fn identical_columns_share_weight() {
        let c = [0.1, 0.5, 0.2, 0.9, 0.0];
        let m = matrix(&[&c, &c, &c]);
        let e = pca_first_component(&m).unwrap();
        for w in &e.weights {
            assert_abs_diff_eq!(*w, 1.0 / 3f64.sqrt(), epsilon = 1e-9);
        }
        let mut by_pc1: Vec<usize> = (0..5).collect();
        by_pc1.sort_by(|&a, &b| e.pc1[a].total_cmp(&e.pc1[b]));
        assert_eq!(by_pc1, vec![4, 0, 2, 1, 3]);
        assert_abs_diff_eq!(e.pc1[4], 0.0);
        assert_abs_diff_eq!(e.pc1[3], 1.0);
    }

    #[test]
    fn constant_columns_are_zero_variance() {
        let m = matrix(&[&[0.3, 0.3], &[0.0, 0.0]]);
        assert_eq!(pca_first_component(&m), Err(EnsembleError::ZeroVariance));
    }

    #[test]
    fn orientation_follows_row_mean() {
        let m = matrix(&[&[0.9, 0.1, 0.5, 0.0], &[0.8, 0.2, 0.4, 0.1]]);
        let e = pca_first_component(&m).unwrap();
        assert!(covariance(&e.raw_pc1, &m.row_means()) >= 0.0);
        assert!(e.pc1[0] > e.pc1[1]);
    }

    #[test]
    fn majority_is_strict() {
        assert!(intersection_label(&[true, true, true, false]));
        assert!(!intersection_label(&[true, true, false, false]));
        assert!(intersection_label(&[true, true, false]));
        assert!(!intersection_label(&[false, false]));
    }

    #[test]
    fn union_cases() {
        assert!(!union_label(&[false, false, false]));
        assert!(union_label(&[true, false, false]));
        assert!(union_label(&[true, true, true]));
    }

    #[test]
    fn threshold_separating_case() {
        let (tau, sweep) =
            optimal_threshold(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert_abs_diff_eq!(tau, 0.5, epsilon = 1e-15);
        let best = sweep.iter().find(|p| p.threshold == tau).unwrap();
        assert_eq!(best.f1, 1.0);
    }

    #[test]
    fn threshold_without_positives() {
        let scores = [0.1, 0.4, 0.3];
        let (tau, _) = optimal_threshold(&scores, &[false; 3]).unwrap();
        assert!(scores.iter().all(|&s| s < tau));
    }

    #[test]
    fn threshold_all_positive() {
        let scores = [0.1, 0.4, 0.3];
        let (tau, sweep) = optimal_threshold(&scores, &[true; 3]).unwrap();
        assert!(scores.iter().all(|&s| s >= tau));
        assert_eq!(sweep[0].f1, 1.0);
        assert_eq!(tau, sweep[0].threshold);
    }

    #[test]
    fn ties_form_one_step() {
        let (_, sweep) = optimal_threshold(&[0.5, 0.5, 0.5], &[true, false, true]).unwrap();
        assert_eq!(sweep.len(), 2);
        assert_eq!(sweep[0].tp, 2);
        assert_eq!(sweep[1].tp + sweep[1].fp, 0);
        assert_eq!(sweep[1].precision, None);
    }

    #[test]
    fn fuse_examples() {
        let union = [true, true, true, false];
        let pc1 = [0.9, 0.3, 0.6, 0.2];
        assert_eq!(fuse_labels(&union, &pc1, 0.5).unwrap(), vec![true, false, true, false]);
        assert_eq!(fuse_labels(&union, &pc1, 0.0).unwrap(), union.to_vec());
        assert_eq!(fuse_labels(&union, &pc1, 1.5).unwrap(), vec![false; 4]);
    }

    #[test]
    fn excluded_model_is_dropped() {
        let inputs = TopicInputs {
            topic: "t".into(),
            models: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            text_ids: vec!["1".into(), "2".into(), "3".into()],
            labels: vec![vec![true; 4], vec![false; 4], vec![true, true, false, false]],
            scores: vec![vec![0.5; 4], vec![0.0; 4], vec![0.3, 0.2, 0.0, 0.0]],
        };
        let excluded: BTreeSet<String> = ["c".to_string()].into();
        let out = ensemble_topic(&inputs, &excluded).unwrap();
        assert_eq!(out.decision.models, vec!["a", "b", "d"]);
        assert_eq!(out.scores.weights.len(), 3);
    }

    #[test]
    fn unanimous_models_pass_through() {
        let labels = [true, false, true, false, false];
        let scores = [0.6, 0.0, 0.3, 0.0, 0.0];
        let inputs = TopicInputs {
            topic: "t".into(),
            models: vec!["a".into(), "b".into(), "c".into()],
            text_ids: (0..5).map(|i| i.to_string()).collect(),
            labels: labels.iter().map(|&l| vec![l; 3]).collect(),
            scores: scores.iter().map(|&s| vec![s; 3]).collect(),
        };
        let out = ensemble_topic(&inputs, &BTreeSet::new()).unwrap();
        assert_eq!(out.decision.final_label, labels.to_vec());
        assert_eq!(out.decision.union_label, out.decision.intersection_label);
    }

    #[test]
    fn all_zero_scores_are_degenerate_not_fatal() {
        let inputs = TopicInputs {
            topic: "t".into(),
            models: vec!["a".into(), "b".into()],
            text_ids: vec!["1".into(), "2".into()],
            labels: vec![vec![true, false], vec![false, false]],
            scores: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
        };
        let out = ensemble_topic(&inputs, &BTreeSet::new()).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.decision.final_label, vec![false, false]);
    }
}
