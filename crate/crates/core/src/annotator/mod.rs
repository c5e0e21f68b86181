//! Prompting every configured model about every text and collecting the
//! parsed per-topic answers.

pub mod client;
pub mod parse;
pub mod prompt;

use std::collections::{HashMap, HashSet};

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use client::{ChatClient, Decoding, ModelBackend, RawResponse, ResponseCache};
pub use parse::{parse_response, ParseError, ParseWarning, ParsedTopic};
pub use prompt::{build_prompt, with_reminder};

use crate::corpus::{TextItem, TopicSet};

#[derive(Debug, Error)]
pub enum AnnotatorError {
    #[error("at least 2 backends are required, got {0}")]
    TooFewBackends(usize),
    #[error("backend name {0:?} is configured twice")]
    DuplicateBackend(String),
    #[error("{failed} of {total} cells failed, above the allowed fraction {allowed}")]
    FailureBudgetExceeded {
        failed: usize,
        total: usize,
        allowed: f64,
    },
    #[error("annotation matrix is incomplete: {0}")]
    Incomplete(String),
}

/// One model's answer for one (text, topic) cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicAnnotation {
    pub model: String,
    pub text_id: String,
    pub topic: String,
    pub label: bool,
    pub phrases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<ParseWarning>,
    /// No usable answer could be obtained; the cell counts as negative.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub failed: bool,
}

/// Answers over models × texts × leaf topics, stored model-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationMatrix {
    models: Vec<String>,
    text_ids: Vec<String>,
    topics: Vec<String>,
    entries: Vec<TopicAnnotation>,
    model_index: HashMap<String, usize>,
    text_index: HashMap<String, usize>,
    topic_index: HashMap<String, usize>,
}

fn index_of(names: &[String]) -> HashMap<String, usize> {
    names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect()
}

impl AnnotationMatrix {
    /// Assemble from entries in any order; every cell must appear exactly once.
    pub fn from_entries(
        models: Vec<String>,
        text_ids: Vec<String>,
        topics: Vec<String>,
        entries: Vec<TopicAnnotation>,
    ) -> Result<Self, AnnotatorError> {
        let model_index = index_of(&models);
        let text_index = index_of(&text_ids);
        let topic_index = index_of(&topics);
        let total = models.len() * text_ids.len() * topics.len();
        let mut slots: Vec<Option<TopicAnnotation>> = vec![None; total];
        for entry in entries {
            let (Some(&m), Some(&t), Some(&k)) = (
                model_index.get(&entry.model),
                text_index.get(&entry.text_id),
                topic_index.get(&entry.topic),
            ) else {
                return Err(AnnotatorError::Incomplete(format!(
                    "unknown cell ({}, {}, {})",
                    entry.model, entry.text_id, entry.topic
                )));
            };
            let slot = &mut slots[(m * text_ids.len() + t) * topics.len() + k];
            if slot.is_some() {
                return Err(AnnotatorError::Incomplete(format!(
                    "duplicate cell ({}, {}, {})",
                    entry.model, entry.text_id, entry.topic
                )));
            }
            *slot = Some(entry);
        }
        let missing = slots.iter().filter(|s| s.is_none()).count();
        if missing > 0 {
            return Err(AnnotatorError::Incomplete(format!("{missing} cells missing")));
        }
        Ok(Self {
            entries: slots.into_iter().flatten().collect(),
            models,
            text_ids,
            topics,
            model_index,
            text_index,
            topic_index,
        })
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn text_ids(&self) -> &[String] {
        &self.text_ids
    }

    pub fn topics(&self) -> &[String] {
        &self.topics
    }

    pub fn entries(&self) -> &[TopicAnnotation] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, model: &str, text_id: &str, topic: &str) -> Option<&TopicAnnotation> {
        let m = *self.model_index.get(model)?;
        let t = *self.text_index.get(text_id)?;
        let k = *self.topic_index.get(topic)?;
        self.entries
            .get((m * self.text_ids.len() + t) * self.topics.len() + k)
    }

    pub fn failed_cells(&self) -> usize {
        self.entries.iter().filter(|e| e.failed).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotateOptions {
    /// Abort when more than this fraction of cells has no usable answer.
    pub max_failure_fraction: f64,
}

impl Default for AnnotateOptions {
    fn default() -> Self {
        Self {
            max_failure_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotateStats {
    pub prompts: usize,
    pub cache_hits: usize,
    pub network_requests: usize,
    pub reminders_sent: usize,
    pub failed_cells: usize,
    pub warnings: usize,
}

struct JobOutcome {
    annotations: Vec<TopicAnnotation>,
    cache_hits: usize,
    reminder: bool,
}

fn failed_cells(model: &str, item: &TextItem, topics: &TopicSet) -> Vec<TopicAnnotation> {
    topics
        .topics()
        .iter()
        .map(|t| TopicAnnotation {
            model: model.to_string(),
            text_id: item.id.clone(),
            topic: t.short_name.clone(),
            label: false,
            phrases: Vec::new(),
            warning: None,
            failed: true,
        })
        .collect()
}

fn to_annotations(model: &str, item: &TextItem, parsed: Vec<ParsedTopic>) -> Vec<TopicAnnotation> {
    parsed
        .into_iter()
        .map(|p| TopicAnnotation {
            model: model.to_string(),
            text_id: item.id.clone(),
            topic: p.topic,
            label: p.label,
            phrases: p.phrases,
            warning: p.warning,
            failed: false,
        })
        .collect()
}

async fn annotate_one(client: &ChatClient, leaves: &TopicSet, item: &TextItem) -> JobOutcome {
    let model = client.backend().name.clone();
    let prompt = build_prompt(leaves, item);
    let mut cache_hits = 0;
    let first = match client.query(&item.id, &prompt).await {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(%model, text = %item.id, error = %e, "request failed");
            return JobOutcome {
                annotations: failed_cells(&model, item, leaves),
                cache_hits,
                reminder: false,
            };
        }
    };
    cache_hits += usize::from(first.from_cache);
    if let Ok(parsed) = parse_response(&first.content, leaves) {
        return JobOutcome {
            annotations: to_annotations(&model, item, parsed),
            cache_hits,
            reminder: false,
        };
    }
    let retry = match client.query(&item.id, &with_reminder(&prompt)).await {
        Ok(r) => r,
        Err(e) => {
            tracing::warn!(%model, text = %item.id, error = %e, "reminder request failed");
            return JobOutcome {
                annotations: failed_cells(&model, item, leaves),
                cache_hits,
                reminder: true,
            };
        }
    };
    cache_hits += usize::from(retry.from_cache);
    let annotations = match parse_response(&retry.content, leaves) {
        Ok(parsed) => to_annotations(&model, item, parsed),
        Err(_) => {
            tracing::warn!(%model, text = %item.id, "response unparseable after reminder");
            failed_cells(&model, item, leaves)
        }
    };
    JobOutcome {
        annotations,
        cache_hits,
        reminder: true,
    }
}

/// Prompt every backend about every text (one prompt carries all leaf
/// topics) and assemble the complete annotation matrix.
///
/// Requests run concurrently, bounded per backend; assembly is keyed by cell
/// so the result does not depend on arrival order.
pub async fn annotate_corpus(
    corpus: &[TextItem],
    topics: &TopicSet,
    clients: &[ChatClient],
    options: AnnotateOptions,
) -> Result<(AnnotationMatrix, AnnotateStats), AnnotatorError> {
    if clients.len() < 2 {
        return Err(AnnotatorError::TooFewBackends(clients.len()));
    }
    let mut names = HashSet::new();
    for c in clients {
        if !names.insert(c.backend().name.clone()) {
            return Err(AnnotatorError::DuplicateBackend(c.backend().name.clone()));
        }
    }
    let leaves = topics.leaf_set();
    let semaphores: Vec<Semaphore> = clients
        .iter()
        .map(|c| Semaphore::new(c.backend().parallelism.max(1)))
        .collect();
    let requests_before: usize = clients.iter().map(ChatClient::requests_sent).sum();

    let jobs = clients.iter().enumerate().flat_map(|(b, client)| {
        let leaves = &leaves;
        let semaphores = &semaphores;
        corpus.iter().map(move |item| async move {
            let _permit = semaphores[b].acquire().await.expect("semaphore open");
            annotate_one(client, leaves, item).await
        })
    });
    let outcomes = join_all(jobs).await;

    let mut stats = AnnotateStats {
        prompts: outcomes.len(),
        ..AnnotateStats::default()
    };
    let mut entries = Vec::with_capacity(outcomes.len() * leaves.len());
    for outcome in outcomes {
        stats.cache_hits += outcome.cache_hits;
        stats.reminders_sent += usize::from(outcome.reminder);
        entries.extend(outcome.annotations);
    }
    stats.network_requests =
        clients.iter().map(ChatClient::requests_sent).sum::<usize>() - requests_before;
    stats.failed_cells = entries.iter().filter(|e| e.failed).count();
    stats.warnings = entries.iter().filter(|e| e.warning.is_some()).count();

    let total = entries.len();
    if total > 0 && stats.failed_cells as f64 > options.max_failure_fraction * total as f64 {
        return Err(AnnotatorError::FailureBudgetExceeded {
            failed: stats.failed_cells,
            total,
            allowed: options.max_failure_fraction,
        });
    }
    let matrix = AnnotationMatrix::from_entries(
        clients.iter().map(|c| c.backend().name.clone()).collect(),
        corpus.iter().map(|t| t.id.clone()).collect(),
        leaves.topics().iter().map(|t| t.short_name.clone()).collect(),
        entries,
    )?;
    Ok((matrix, stats))
}
