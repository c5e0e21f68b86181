//! Relevancy scores from evidence phrases.
//!
//! A positive answer's phrases are embedded and compared with the topic
//! description. The best phrase similarity, minus the description's
//! similarity to the empty string, clamped into [0, 1], is the score.

pub mod embedding;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embedding::{
    EmbeddingBackend, EmbeddingCache, EmbeddingClient, EmbeddingStore, MAX_EMBED_WORDS,
};

use crate::annotator::{AnnotationMatrix, TopicAnnotation};
use crate::corpus::{Topic, TopicSet};
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum RelevancyError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("embedding has non-finite entries")]
    NonFinite,
    #[error("embedding is empty")]
    Empty,
    #[error("embedding dimension {got} differs from {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero-norm vector")]
    ZeroNormVector,
    #[error("no embedding for text {0:?}")]
    MissingEmbedding(String),
    #[error("malformed embedding response: {0}")]
    MalformedEmbedding(String),
    #[error("annotation topic {annotation:?} does not match {topic:?}")]
    TopicMismatch { annotation: String, topic: String },
    #[error("aggregation needs at least one child")]
    NoChildren,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, RelevancyError> {
        if values.is_empty() {
            return Err(RelevancyError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RelevancyError::NonFinite);
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// `dot(u, v) / (|u| |v|)`, accumulated in f64.
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, RelevancyError> {
    if u.dim() != v.dim() {
        return Err(RelevancyError::DimensionMismatch {
            expected: u.dim(),
            got: v.dim(),
        });
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.values().iter().zip(v.values()) {
        let (a, b) = (a as f64, b as f64);
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(RelevancyError::ZeroNormVector);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Similarity between a topic description and the empty string.
pub fn topic_baseline(topic: &Topic, store: &EmbeddingStore) -> Result<f64, RelevancyError> {
    cosine_similarity(store.get(&topic.description)?, store.get("")?)
}

/// `max_p clamp(s_p - b, 0)`, capped at 1. Zero for an empty set.
pub fn adjusted_max(similarities: &[f64], baseline: f64) -> f64 {
    similarities
        .iter()
        .map(|s| (s - baseline).max(0.0))
        .fold(0.0, f64::max)
        .min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhraseSimilarity {
    pub phrase: String,
    pub raw_sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevancyRecord {
    pub model: String,
    pub text_id: String,
    pub topic: String,
    pub label: bool,
    pub score: f64,
    pub baseline: f64,
    pub per_phrase_sims: Vec<PhraseSimilarity>,
    /// Positive answer that came with no evidence phrase.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub potential_false_positive: bool,
}

/// Score one annotation against its topic using precomputed embeddings.
pub fn relevancy_score(
    annotation: &TopicAnnotation,
    topic: &Topic,
    baseline: f64,
    store: &EmbeddingStore,
) -> Result<RelevancyRecord, RelevancyError> {
    if annotation.topic != topic.short_name {
        return Err(RelevancyError::TopicMismatch {
            annotation: annotation.topic.clone(),
            topic: topic.short_name.clone(),
        });
    }
    let mut per_phrase_sims = Vec::new();
    if annotation.label {
        let description = store.get(&topic.description)?;
        for phrase in &annotation.phrases {
            per_phrase_sims.push(PhraseSimilarity {
                phrase: phrase.clone(),
                raw_sim: cosine_similarity(description, store.get(phrase)?)?,
            });
        }
    }
    let sims: Vec<f64> = per_phrase_sims.iter().map(|p| p.raw_sim).collect();
    Ok(RelevancyRecord {
        model: annotation.model.clone(),
        text_id: annotation.text_id.clone(),
        topic: annotation.topic.clone(),
        label: annotation.label,
        score: if annotation.label { adjusted_max(&sims, baseline) } else { 0.0 },
        baseline,
        per_phrase_sims,
        potential_false_positive: annotation.label && annotation.phrases.is_empty(),
    })
}

/// Parent label is any child present; parent score is the mean score of the
/// present children (0 if none).
pub fn aggregate_subtopics(children: &[(bool, f64)]) -> Result<(bool, f64), RelevancyError> {
    if children.is_empty() {
        return Err(RelevancyError::NoChildren);
    }
    let present: Vec<f64> = children.iter().filter(|(l, _)| *l).map(|(_, s)| *s).collect();
    if present.is_empty() {
        return Ok((false, 0.0));
    }
    Ok((true, present.iter().sum::<f64>() / present.len() as f64))
}

/// Every string that scoring needs embedded: the empty string, every leaf
/// description, and every phrase of a positive answer.
pub fn texts_to_embed<'a>(matrix: &'a AnnotationMatrix, topics: &'a TopicSet) -> Vec<&'a str> {
    let mut out = vec![""];
    out.extend(topics.leaves().iter().map(|t| t.description.as_str()));
    for entry in matrix.entries().iter().filter(|e| e.label) {
        out.extend(entry.phrases.iter().map(String::as_str));
    }
    out
}

/// Score every cell of the matrix. Records come back in matrix order.
pub fn score_matrix(
    matrix: &AnnotationMatrix,
    topics: &TopicSet,
    store: &EmbeddingStore,
) -> Result<Vec<RelevancyRecord>, RelevancyError> {
    let leaves: HashMap<&str, &Topic> = topics
        .leaves()
        .into_iter()
        .map(|t| (t.short_name.as_str(), t))
        .collect();
    let mut baselines = HashMap::new();
    for (name, topic) in &leaves {
        baselines.insert(*name, topic_baseline(topic, store)?);
    }
    matrix
        .entries()
        .iter()
        .map(|entry| {
            let topic = leaves.get(entry.topic.as_str()).ok_or_else(|| {
                RelevancyError::TopicMismatch {
                    annotation: entry.topic.clone(),
                    topic: "<none>".into(),
                }
            })?;
            relevancy_score(entry, topic, baselines[entry.topic.as_str()], store)
        })
        .collect()
}

/// Label and score at the level of the configured topics (parents aggregated
/// from their subtopics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicScore {
    pub model: String,
    pub text_id: String,
    pub topic: String,
    pub label: bool,
    pub score: f64,
}

/// Roll leaf records up to top-level topics, ordered model, text, topic.
pub fn topic_scores(
    records: &[RelevancyRecord],
    topics: &TopicSet,
    models: &[String],
    text_ids: &[String],
) -> Result<Vec<TopicScore>, RelevancyError> {
    let by_cell: HashMap<(&str, &str, &str), &RelevancyRecord> = records
        .iter()
        .map(|r| ((r.model.as_str(), r.text_id.as_str(), r.topic.as_str()), r))
        .collect();
    let lookup = |m: &str, t: &str, k: &str| {
        by_cell
            .get(&(m, t, k))
            .copied()
            .ok_or_else(|| RelevancyError::MissingEmbedding(format!("record ({m}, {t}, {k})")))
    };
    let mut out = Vec::new();
    for model in models {
        for text_id in text_ids {
            for topic in topics.topics() {
                let (label, score) = if topic.has_subtopics() {
                    let children = topic
                        .subtopics
                        .iter()
                        .map(|s| lookup(model, text_id, &s.short_name).map(|r| (r.label, r.score)))
                        .collect::<Result<Vec<_>, _>>()?;
                    aggregate_subtopics(&children)?
                } else {
                    let r = lookup(model, text_id, &topic.short_name)?;
                    (r.label, r.score)
                };
                out.push(TopicScore {
                    model: model.clone(),
                    text_id: text_id.clone(),
                    topic: topic.short_name.clone(),
                    label,
                    score,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(x: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn cosine_cases() {
        let u = v(&[0.3, -1.0, 2.0]);
        assert_abs_diff_eq!(cosine_similarity(&u, &u).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(),
            0.0
        );
        assert_abs_diff_eq!(
            cosine_similarity(&u, &v(&[-0.3, 1.0, -2.0])).unwrap(),
            -1.0,
            epsilon = 1e-12
        );
        assert!(matches!(
            cosine_similarity(&u, &v(&[0.0, 0.0, 0.0])),
            Err(RelevancyError::ZeroNormVector)
        ));
        assert!(cosine_similarity(&u, &v(&[1.0])).is_err());
        assert!(EmbeddingVector::new(vec![f32::NAN]).is_err());
    }

    fn store() -> EmbeddingStore {
        let mut s = EmbeddingStore::new();
        s.insert("", v(&[0.28, 0.0, 0.96])).unwrap();
        s.insert("Body dissatisfaction.", v(&[1.0, 0.0, 0.0])).unwrap();
        s.insert("Same words.", v(&[1.0, 0.0, 0.0])).unwrap();
        s.insert("baggy clothes", v(&[0.8, 0.6, 0.0])).unwrap();
        s.insert("scared to talk", v(&[0.6, 0.8, 0.0])).unwrap();
        s
    }

    fn annotation(label: bool, phrases: &[&str]) -> TopicAnnotation {
        TopicAnnotation {
            model: "m".into(),
            text_id: "t".into(),
            topic: "bodyhate".into(),
            label,
            phrases: phrases.iter().map(|s| s.to_string()).collect(),
            warning: None,
            failed: false,
        }
    }

    #[test]
    fn baseline_is_deterministic_and_description_keyed() {
        let s = store();
        let a = topic_baseline(&Topic::new("a", "Body dissatisfaction."), &s).unwrap();
        let b = topic_baseline(&Topic::new("b", "Same words."), &s).unwrap();
        assert_eq!(a, b);
        assert_abs_diff_eq!(a, 0.28, epsilon = 1e-6);
    }

    #[test]
    fn score_takes_max_then_subtracts_baseline() {
        let s = store();
        let topic = Topic::new("bodyhate", "Body dissatisfaction.");
        let b = topic_baseline(&topic, &s).unwrap();
        let r = relevancy_score(&annotation(true, &["baggy clothes", "scared to talk"]), &topic, b, &s)
            .unwrap();
        assert_eq!(r.per_phrase_sims.len(), 2);
        assert_abs_diff_eq!(r.per_phrase_sims[0].raw_sim, 0.8, epsilon = 1e-6);
        assert_abs_diff_eq!(r.score, r.per_phrase_sims[0].raw_sim - b, epsilon = 1e-12);
        assert!(!r.potential_false_positive);
    }

    #[test]
    fn negative_or_empty_scores_zero() {
        let s = store();
        let topic = Topic::new("bodyhate", "Body dissatisfaction.");
        let neg = relevancy_score(&annotation(false, &["baggy clothes"]), &topic, 0.28, &s).unwrap();
        assert_eq!(neg.score, 0.0);
        assert!(neg.per_phrase_sims.is_empty());
        let empty = relevancy_score(&annotation(true, &[]), &topic, 0.28, &s).unwrap();
        assert_eq!(empty.score, 0.0);
        assert!(empty.potential_false_positive);
    }

    #[test]
    fn phrase_equal_to_description() {
        let s = store();
        let topic = Topic::new("bodyhate", "Body dissatisfaction.");
        let r = relevancy_score(&annotation(true, &["Same words."]), &topic, 0.28, &s).unwrap();
        assert_abs_diff_eq!(r.score, 1.0 - 0.28, epsilon = 1e-12);
    }

    #[test]
    fn topic_mismatch() {
        let s = store();
        let topic = Topic::new("other", "Body dissatisfaction.");
        assert!(relevancy_score(&annotation(true, &[]), &topic, 0.0, &s).is_err());
    }

    #[test]
    fn aggregation() {
        assert_eq!(aggregate_subtopics(&[(false, 0.0), (false, 0.0)]).unwrap(), (false, 0.0));
        assert_eq!(aggregate_subtopics(&[(true, 0.4), (false, 0.0)]).unwrap(), (true, 0.4));
        let (l, s) = aggregate_subtopics(&[(true, 0.2), (false, 0.0), (true, 0.6), (false, 0.0)]).unwrap();
        assert!(l);
        assert_abs_diff_eq!(s, 0.4, epsilon = 1e-15);
        assert!(aggregate_subtopics(&[]).is_err());
    }

    proptest! {
        #[test]
        fn max_then_clamp_equals_clamp_then_max(
            sims in proptest::collection::vec(-1.0f64..=1.0, 1..12),
            b in -1.0f64..=1.0,
        ) {
            let lhs = adjusted_max(&sims, b);
            let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let rhs = (max - b).clamp(0.0, 1.0);
            prop_assert!((lhs - rhs).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&lhs));
        }

        #[test]
        fn aggregate_bounds(children in proptest::collection::vec((any::<bool>(), 0.0f64..=1.0), 1..10)) {
            let (label, score) = aggregate_subtopics(&children).unwrap();
            let present: Vec<f64> = children.iter().filter(|c| c.0).map(|c| c.1).collect();
            prop_assert_eq!(label, !present.is_empty());
            if label {
                let hi = present.iter().copied().fold(f64::MIN, f64::max);
                let lo = present.iter().copied().fold(f64::MAX, f64::min);
                prop_assert!(score <= hi + 1e-12 && score >= lo - 1e-12);
            } else {
                prop_assert_eq!(score, 0.0);
            }
        }
    }
}
