//! Chance-corrected inter-rater agreement over model labels and binned scores.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of ordinal levels used when comparing relevancy scores.
pub const SCORE_LEVELS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum AgreementError {
    #[error("item {item} is missing a rating from rater {rater}")]
    IncompleteRatings { item: usize, rater: usize },
    #[error("rating matrix needs at least {needed} {what}, got {got}")]
    TooSmall {
        what: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("row {row} sums to {sum}, expected {expected}")]
    RowSum { row: usize, sum: usize, expected: usize },
    #[error("category {category} out of range for k = {k}")]
    CategoryOutOfRange { category: usize, k: usize },
    #[error("chance agreement equals 1; coefficient undefined")]
    DegenerateChance,
    #[error("score {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("bootstrap needs at least 100 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("{skipped} of {total} bootstrap resamples were degenerate")]
    TooManyDegenerate { skipped: usize, total: usize },
    #[error("outlier detection needs at least 3 models, got {0}")]
    TooFewModels(usize),
    #[error("model label vectors have unequal lengths")]
    LengthMismatch,
}

/// Per-item category counts: `counts[i][j]` raters put item `i` in category `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingMatrix {
    counts: Vec<Vec<usize>>,
    raters: usize,
    categories: usize,
}

impl RatingMatrix {
    pub fn from_counts(counts: Vec<Vec<usize>>) -> Result<Self, AgreementError> {
        let categories = counts.first().map_or(0, Vec::len);
        if categories < 2 {
            return Err(AgreementError::TooSmall {
                what: "categories",
                needed: 2,
                got: categories,
            });
        }
        let raters: usize = counts[0].iter().sum();
        if raters < 2 {
            return Err(AgreementError::TooSmall {
                what: "raters",
                needed: 2,
                got: raters,
            });
        }
        for (row, r) in counts.iter().enumerate() {
            if r.len() != categories {
                return Err(AgreementError::CategoryOutOfRange {
                    category: r.len(),
                    k: categories,
                });
            }
            let sum: usize = r.iter().sum();
            if sum != raters {
                return Err(AgreementError::RowSum {
                    row,
                    sum,
                    expected: raters,
                });
            }
        }
        Ok(Self {
            counts,
            raters,
            categories,
        })
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    /// Raters per item (`n`).
    pub fn raters(&self) -> usize {
        self.raters
    }

    /// Item count (`N`).
    pub fn items(&self) -> usize {
        self.counts.len()
    }

    /// Category count (`k`).
    pub fn categories(&self) -> usize {
        self.categories
    }

    /// Overall proportion of ratings in each category.
    pub fn category_proportions(&self) -> Vec<f64> {
        let n = self.raters as f64;
        let items = self.items() as f64;
        (0..self.categories)
            .map(|j| self.counts.iter().map(|r| r[j] as f64 / n).sum::<f64>() / items)
            .collect()
    }

}

/// Tally per-rater category assignments. `ratings[r][i]` is rater `r`'s
/// category for item `i`; `None` marks a missing rating.
pub fn build_rating_matrix(
    ratings: &[Vec<Option<usize>>],
    categories: usize,
) -> Result<RatingMatrix, AgreementError> {
    if ratings.len() < 2 {
        return Err(AgreementError::TooSmall {
            what: "raters",
            needed: 2,
            got: ratings.len(),
        });
    }
    let items = ratings.iter().map(Vec::len).max().unwrap_or(0);
    let mut counts = vec![vec![0usize; categories]; items];
    for (rater, row) in ratings.iter().enumerate() {
        for (item, slot) in counts.iter_mut().enumerate() {
            match row.get(item).copied().flatten() {
                Some(c) if c < categories => slot[c] += 1,
                Some(c) => {
                    return Err(AgreementError::CategoryOutOfRange {
                        category: c,
                        k: categories,
                    })
                }
                None => return Err(AgreementError::IncompleteRatings { item, rater }),
            }
        }
    }
    RatingMatrix::from_counts(counts)
}

/// Convenience wrapper for complete boolean ratings (category 0 = yes, 1 = no).
pub fn rating_matrix_from_labels(labels: &[Vec<bool>]) -> Result<RatingMatrix, AgreementError> {
    let ratings: Vec<Vec<Option<usize>>> = labels
        .iter()
        .map(|r| r.iter().map(|&l| Some(if l { 0 } else { 1 })).collect())
        .collect();
    build_rating_matrix(&ratings, 2)
}

/// Observed agreement `P_o`.
pub fn percent_agreement(m: &RatingMatrix) -> f64 {
    let n = m.raters as f64;
    let pairs = n * (n - 1.0);
    let total: f64 = m
        .counts
        .iter()
        .map(|row| {
            row.iter()
                .map(|&c| (c as f64) * (c as f64 - 1.0))
                .sum::<f64>()
                / pairs
        })
        .sum();
    total / m.items() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Coefficient {
    #[serde(rename = "AC1")]
    Ac1,
    Fleiss,
}

impl fmt::Display for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Ac1 => f.write_str("AC1"),
            Self::Fleiss => f.write_str("Fleiss"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementResult {
    pub kind: Coefficient,
    pub coefficient: f64,
    pub p_o: f64,
    /// Chance agreement: `P_e*` for AC1, `P_e` for Fleiss.
    pub p_e: f64,
    pub ci_95: Option<(f64, f64)>,
}

fn chance_corrected(kind: Coefficient, p_o: f64, p_e: f64) -> Result<AgreementResult, AgreementError> {
    // p_e within rounding of 1 has no meaningful correction
    if p_e >= 1.0 - 1e-15 {
        return Err(AgreementError::DegenerateChance);
    }
    Ok(AgreementResult {
        kind,
        coefficient: (p_o - p_e) / (1.0 - p_e),
        p_o,
        p_e,
        ci_95: None,
    })
}

/// Gwet's AC1 with adjusted chance agreement
/// `P_e* = 1/(k-1) * Σ p_j (1 - p_j)`.
pub fn gwet_ac1(m: &RatingMatrix) -> Result<AgreementResult, AgreementError> {
    let p_o = percent_agreement(m);
    let k = m.categories as f64;
    let p_e = m
        .category_proportions()
        .iter()
        .map(|p| p * (1.0 - p))
        .sum::<f64>()
        / (k - 1.0);
    chance_corrected(Coefficient::Ac1, p_o, p_e)
}

/// Fleiss' kappa with chance agreement `P_e = Σ p_j²`.
pub fn fleiss_kappa(m: &RatingMatrix) -> Result<AgreementResult, AgreementError> {
    let p_o = percent_agreement(m);
    let p_e = m.category_proportions().iter().map(|p| p * p).sum::<f64>();
    chance_corrected(Coefficient::Fleiss, p_o, p_e)
}

pub fn coefficient(kind: Coefficient, m: &RatingMatrix) -> Result<AgreementResult, AgreementError> {
    match kind {
        Coefficient::Ac1 => gwet_ac1(m),
        Coefficient::Fleiss => fleiss_kappa(m),
    }
}

/// Ordinal level of one score: `min(floor(10 s), 9)`.
pub fn bin_score(score: f64) -> Result<usize, AgreementError> {
    if !(0.0..=1.0).contains(&score) {
        return Err(AgreementError::OutOfRange(score));
    }
    Ok(((score * SCORE_LEVELS as f64).floor() as usize).min(SCORE_LEVELS - 1))
}

pub fn bin_scores(scores: &[f64]) -> Result<Vec<usize>, AgreementError> {
    scores.iter().map(|&s| bin_score(s)).collect()
}

/// Rating matrix over binned scores with the fixed 10-level category space.
pub fn rating_matrix_from_scores(scores: &[Vec<f64>]) -> Result<RatingMatrix, AgreementError> {
    let ratings = scores
        .iter()
        .map(|r| bin_scores(r).map(|b| b.into_iter().map(Some).collect()))
        .collect::<Result<Vec<Vec<Option<usize>>>, _>>()?;
    build_rating_matrix(&ratings, SCORE_LEVELS)
}

/// Default number of bootstrap resamples.
pub const DEFAULT_RESAMPLES: usize = 1000;

/// Percentile 95% interval from an item-level bootstrap.
///
/// Resamples whose chance agreement is degenerate are skipped; more than 10%
/// skipped is an error.
pub fn bootstrap_ci(
    kind: Coefficient,
    m: &RatingMatrix,
    resamples: usize,
    seed: u64,
) -> Result<(f64, f64), AgreementError> {
    if resamples < 100 {
        return Err(AgreementError::TooFewResamples(resamples));
    }
    let n = m.raters as f64;
    let k = m.categories;
    let items = m.items();
    let row_agreement: Vec<f64> = m
        .counts
        .iter()
        .map(|row| {
            row.iter()
                .map(|&c| (c as f64) * (c as f64 - 1.0))
                .sum::<f64>()
                / (n * (n - 1.0))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(resamples);
    let mut skipped = 0usize;
    let mut totals = vec![0usize; k];
    for _ in 0..resamples {
        totals.iter_mut().for_each(|t| *t = 0);
        let mut agree = 0.0;
        for _ in 0..items {
            let i = rng.random_range(0..items);
            agree += row_agreement[i];
            for (t, &c) in totals.iter_mut().zip(&m.counts[i]) {
                *t += c;
            }
        }
        let p_o = agree / items as f64;
        let proportions = totals.iter().map(|&t| t as f64 / (n * items as f64));
        let p_e = match kind {
            Coefficient::Ac1 => proportions.map(|p| p * (1.0 - p)).sum::<f64>() / (k as f64 - 1.0),
            Coefficient::Fleiss => proportions.map(|p| p * p).sum::<f64>(),
        };
        match chance_corrected(kind, p_o, p_e) {
            Ok(r) => values.push(r.coefficient),
            Err(_) => skipped += 1,
        }
    }
    if skipped * 10 > resamples {
        return Err(AgreementError::TooManyDegenerate {
            skipped,
            total: resamples,
        });
    }
    values.sort_by(f64::total_cmp);
    Ok((percentile(&values, 0.025), percentile(&values, 0.975)))
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Result of leave-one-out outlier screening.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    /// AC1 over all configured models.
    pub base_ac1: f64,
    /// For each configured model, AC1 without it minus `base_ac1` (first round).
    pub deltas: BTreeMap<String, f64>,
    /// Excluded models in the order they were removed.
    pub excluded: Vec<String>,
    /// AC1 over the models that remain.
    pub final_ac1: f64,
    pub threshold_fraction: f64,
}

/// Default leave-one-out threshold as a fraction of the current AC1.
pub const DEFAULT_OUTLIER_FRACTION: f64 = 0.10;

fn pooled_ac1(labels: &[(&str, &[bool])]) -> Result<f64, AgreementError> {
    let rows: Vec<Vec<bool>> = labels.iter().map(|(_, l)| l.to_vec()).collect();
    Ok(gwet_ac1(&rating_matrix_from_labels(&rows)?)?.coefficient)
}

/// Greedy leave-one-out exclusion: drop the model whose removal raises AC1
/// the most, while that raise exceeds `fraction * AC1`, recomputing after each
/// removal and never going below two models.
pub fn detect_outliers(
    labels: &[(String, Vec<bool>)],
    fraction: f64,
) -> Result<OutlierReport, AgreementError> {
    if labels.len() < 3 {
        return Err(AgreementError::TooFewModels(labels.len()));
    }
    let len = labels[0].1.len();
    if labels.iter().any(|(_, l)| l.len() != len) {
        return Err(AgreementError::LengthMismatch);
    }
    let mut active: Vec<(&str, &[bool])> = labels
        .iter()
        .map(|(name, l)| (name.as_str(), l.as_slice()))
        .collect();
    let base_ac1 = pooled_ac1(&active)?;
    let mut deltas = BTreeMap::new();
    let mut excluded = Vec::new();
    let mut current = base_ac1;
    let mut first_round = true;
    while active.len() > 2 {
        let mut best: Option<(usize, f64)> = None;
        for idx in 0..active.len() {
            let rest: Vec<_> = active
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != idx)
                .map(|(_, v)| *v)
                .collect();
            let delta = pooled_ac1(&rest)? - current;
            if first_round {
                deltas.insert(active[idx].0.to_string(), delta);
            }
            if best.is_none_or(|(_, d)| delta > d) {
                best = Some((idx, delta));
            }
        }
        first_round = false;
        match best {
            Some((idx, delta)) if delta > fraction * current.abs() => {
                excluded.push(active[idx].0.to_string());
                active.remove(idx);
                current += delta;
            }
            _ => break,
        }
    }
    Ok(OutlierReport {
        base_ac1,
        deltas,
        excluded,
        final_ac1: current,
        threshold_fraction: fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn worked() -> RatingMatrix {
        RatingMatrix::from_counts(vec![vec![2, 0], vec![1, 1]]).unwrap()
    }

    #[test]
    fn tally_two_raters() {
        let m = build_rating_matrix(&[vec![Some(0), Some(0)], vec![Some(0), Some(1)]], 2).unwrap();
        assert_eq!(m.counts(), &[vec![2, 0], vec![1, 1]]);
    }

    #[test]
    fn identical_raters_single_entry_rows() {
        let r = vec![Some(0), Some(1), Some(1), Some(0)];
        let m = build_rating_matrix(&[r.clone(), r.clone(), r], 2).unwrap();
        for row in m.counts() {
            assert_eq!(row.iter().filter(|&&c| c > 0).count(), 1);
            assert!(row.contains(&3));
        }
    }

    #[test]
    fn missing_rating_is_incomplete() {
        let err = build_rating_matrix(&[vec![Some(0), Some(1)], vec![Some(0), None]], 2).unwrap_err();
        assert_eq!(err, AgreementError::IncompleteRatings { item: 1, rater: 1 });
        let short = build_rating_matrix(&[vec![Some(0), Some(1)], vec![Some(0)]], 2).unwrap_err();
        assert_eq!(short, AgreementError::IncompleteRatings { item: 1, rater: 1 });
    }

    #[test]
    fn percent_agreement_cases() {
        assert_abs_diff_eq!(percent_agreement(&worked()), 0.5, epsilon = 1e-15);
        let unanimous = RatingMatrix::from_counts(vec![vec![3, 0], vec![0, 3]]).unwrap();
        assert_abs_diff_eq!(percent_agreement(&unanimous), 1.0);
        let split = RatingMatrix::from_counts(vec![vec![1, 1], vec![1, 1]]).unwrap();
        assert_abs_diff_eq!(percent_agreement(&split), 0.0);
    }

    #[test]
    fn worked_ac1_and_kappa() {
        let ac1 = gwet_ac1(&worked()).unwrap();
        assert_abs_diff_eq!(ac1.p_e, 0.375, epsilon = 1e-15);
        assert_abs_diff_eq!(ac1.coefficient, 0.2, epsilon = 1e-12);
        let kappa = fleiss_kappa(&worked()).unwrap();
        assert_abs_diff_eq!(kappa.p_e, 0.625, epsilon = 1e-15);
        assert_abs_diff_eq!(kappa.coefficient, -1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn unanimous_gives_one() {
        let m = RatingMatrix::from_counts(vec![vec![3, 0, 0], vec![0, 3, 0], vec![0, 0, 3]]).unwrap();
        assert_abs_diff_eq!(gwet_ac1(&m).unwrap().coefficient, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fleiss_kappa(&m).unwrap().coefficient, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_used_category() {
        let m = RatingMatrix::from_counts(vec![vec![2, 0], vec![2, 0]]).unwrap();
        let ac1 = gwet_ac1(&m).unwrap();
        assert_eq!(ac1.p_e, 0.0);
        assert_eq!(ac1.coefficient, ac1.p_o);
        assert_eq!(fleiss_kappa(&m), Err(AgreementError::DegenerateChance));
    }

    #[test]
    fn binning() {
        assert_eq!(bin_score(0.05).unwrap(), 0);
        assert_eq!(bin_score(0.43).unwrap(), 4);
        assert_eq!(bin_score(1.0).unwrap(), 9);
        assert_eq!(bin_score(0.0).unwrap(), 0);
        assert_eq!(bin_score(1.2), Err(AgreementError::OutOfRange(1.2)));
        assert!(bin_score(-0.1).is_err());
        assert!(bin_score(f64::NAN).is_err());
    }

    #[test]
    fn bootstrap_unanimous_and_deterministic() {
        let m = RatingMatrix::from_counts(vec![vec![3, 0], vec![0, 3], vec![3, 0]]).unwrap();
        assert_eq!(bootstrap_ci(Coefficient::Ac1, &m, 200, 1).unwrap(), (1.0, 1.0));
        let rows: Vec<Vec<usize>> = (0..50).flat_map(|_| [vec![2, 0], vec![1, 1]]).collect();
        let big = RatingMatrix::from_counts(rows).unwrap();
        let a = bootstrap_ci(Coefficient::Ac1, &big, 500, 42).unwrap();
        let b = bootstrap_ci(Coefficient::Ac1, &big, 500, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.0 <= 0.2 && 0.2 <= a.1, "{a:?}");
        assert_eq!(
            bootstrap_ci(Coefficient::Ac1, &big, 10, 1),
            Err(AgreementError::TooFewResamples(10))
        );
    }

    #[test]
    fn bootstrap_fails_when_mostly_degenerate() {
        // Fleiss is degenerate whenever a resample only holds all-yes rows.
        let m = RatingMatrix::from_counts(vec![vec![2, 0], vec![2, 0], vec![1, 1]]).unwrap();
        assert!(matches!(
            bootstrap_ci(Coefficient::Fleiss, &m, 500, 3),
            Err(AgreementError::TooManyDegenerate { .. })
        ));
    }

    #[test]
    fn outliers_need_three_models() {
        let l = vec![("a".to_string(), vec![true]), ("b".to_string(), vec![true])];
        assert_eq!(
            detect_outliers(&l, 0.1).unwrap_err(),
            AgreementError::TooFewModels(2)
        );
    }

    #[test]
    fn identical_models_keep_everyone() {
        let v: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let l: Vec<_> = ["a", "b", "c", "d"]
            .iter()
            .map(|n| (n.to_string(), v.clone()))
            .collect();
        let r = detect_outliers(&l, 0.1).unwrap();
        assert!(r.excluded.is_empty());
        assert_abs_diff_eq!(r.base_ac1, 1.0, epsilon = 1e-12);
    }
}
