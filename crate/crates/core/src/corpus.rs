//! Text and topic ingestion.
//!
//! Everything downstream keys on [`TextItem::id`] and [`Topic::short_name`],
//! so both are validated here once and treated as trusted afterwards.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Group name used for texts that carry no group tag.
pub const UNGROUPED: &str = "ungrouped";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate text id {0:?}")]
    DuplicateId(String),
    #[error("text {0:?} is empty")]
    EmptyText(String),
    #[error("malformed topic file: {0}")]
    MalformedTopics(String),
    #[error("duplicate topic short name {0:?}")]
    DuplicateShortName(String),
    #[error("topic {0:?} has no description")]
    MissingDescription(String),
    #[error("topic {0:?} nests subtopics more than one level deep")]
    NestingTooDeep(String),
    #[error("invalid topic short name {0:?}: only [A-Za-z0-9_] allowed")]
    InvalidShortName(String),
    #[error("topic {0:?} must have at least two subtopics")]
    TooFewSubtopics(String),
    #[error("topic set is empty")]
    EmptyTopicSet,
}

/// One free-text unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextItem {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

impl TextItem {
    pub fn group_or_default(&self) -> &str {
        self.group.as_deref().unwrap_or(UNGROUPED)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl FromStr for CorpusFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown corpus format {other:?}")),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Jsonl => f.write_str("jsonl"),
            Self::Csv => f.write_str("csv"),
        }
    }
}

#[derive(Deserialize)]
struct RawItem {
    id: Option<String>,
    text: Option<String>,
    #[serde(default)]
    group: Option<String>,
}

fn read_to_string(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Load a corpus file, returning items in file order.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<TextItem>, CorpusError> {
    let raw = read_to_string(path)?;
    match format {
        CorpusFormat::Jsonl => parse_jsonl(&raw),
        CorpusFormat::Csv => parse_csv(&raw),
    }
}

pub fn parse_jsonl(raw: &str) -> Result<Vec<TextItem>, CorpusError> {
    let mut records = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: RawItem =
            serde_json::from_str(line).map_err(|e| CorpusError::MalformedRecord {
                line: idx + 1,
                reason: e.to_string(),
            })?;
        records.push((idx + 1, item));
    }
    finish(records)
}

pub fn parse_csv(raw: &str) -> Result<Vec<TextItem>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(raw.as_bytes());
    let mut records = Vec::new();
    for (idx, row) in reader.deserialize::<RawItem>().enumerate() {
        // header is line 1
        let line = idx + 2;
        let item = row.map_err(|e| CorpusError::MalformedRecord {
            line,
            reason: e.to_string(),
        })?;
        records.push((line, item));
    }
    finish(records)
}

fn finish(records: Vec<(usize, RawItem)>) -> Result<Vec<TextItem>, CorpusError> {
    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(records.len());
    for (line, raw) in records {
        let id = match raw.id {
            Some(id) if !id.trim().is_empty() => id.trim().to_string(),
            _ => {
                return Err(CorpusError::MalformedRecord {
                    line,
                    reason: "missing or empty field `id`".into(),
                })
            }
        };
        let text = raw.text.ok_or_else(|| CorpusError::MalformedRecord {
            line,
            reason: "missing field `text`".into(),
        })?;
        let text = text.trim().to_string();
        if text.is_empty() {
            return Err(CorpusError::EmptyText(id));
        }
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId(id));
        }
        let group = raw
            .group
            .map(|g| g.trim().to_string())
            .filter(|g| !g.is_empty());
        items.push(TextItem { id, text, group });
    }
    Ok(items)
}

/// Serialize items as JSONL, one object per line.
pub fn to_jsonl(items: &[TextItem]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("TextItem serializes"));
        out.push('\n');
    }
    out
}

/// A curated topic: token-safe short name plus a free-text description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topic {
    pub short_name: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subtopics: Vec<Topic>,
}

impl Topic {
    pub fn new(short_name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            short_name: short_name.into(),
            description: description.into(),
            subtopics: Vec::new(),
        }
    }

    pub fn has_subtopics(&self) -> bool {
        !self.subtopics.is_empty()
    }
}

/// Ordered, validated list of topics. Order is the prompt enumeration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TopicSet {
    topics: Vec<Topic>,
}

#[derive(Deserialize)]
struct RawTopicFile {
    #[serde(default)]
    topics: Vec<RawTopic>,
}

#[derive(Deserialize, Serialize)]
struct RawTopic {
    short_name: String,
    #[serde(default)]
    description: Option<String>,
    #[serde(default)]
    subtopics: Vec<RawTopic>,
}

pub fn is_token_safe(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl TopicSet {
    pub fn new(topics: Vec<Topic>) -> Result<Self, CorpusError> {
        if topics.is_empty() {
            return Err(CorpusError::EmptyTopicSet);
        }
        let mut names = HashSet::new();
        let mut check = |t: &Topic| -> Result<(), CorpusError> {
            if !is_token_safe(&t.short_name) {
                return Err(CorpusError::InvalidShortName(t.short_name.clone()));
            }
            if t.description.trim().is_empty() {
                return Err(CorpusError::MissingDescription(t.short_name.clone()));
            }
            if !names.insert(t.short_name.clone()) {
                return Err(CorpusError::DuplicateShortName(t.short_name.clone()));
            }
            Ok(())
        };
        for topic in &topics {
            check(topic)?;
            if topic.has_subtopics() && topic.subtopics.len() < 2 {
                return Err(CorpusError::TooFewSubtopics(topic.short_name.clone()));
            }
            for sub in &topic.subtopics {
                if sub.has_subtopics() {
                    return Err(CorpusError::NestingTooDeep(sub.short_name.clone()));
                }
                check(sub)?;
            }
        }
        Ok(Self { topics })
    }

    pub fn topics(&self) -> &[Topic] {
        &self.topics
    }

    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }

    pub fn get(&self, short_name: &str) -> Option<&Topic> {
        self.topics.iter().find(|t| t.short_name == short_name)
    }

    /// The units actually prompted: each topic without subtopics, or the
    /// subtopics of a topic that has them, in enumeration order.
    pub fn leaves(&self) -> Vec<&Topic> {
        let mut out = Vec::new();
        for topic in &self.topics {
            if topic.has_subtopics() {
                out.extend(topic.subtopics.iter());
            } else {
                out.push(topic);
            }
        }
        out
    }

    /// The prompt-level topic set (leaves flattened into one list).
    pub fn leaf_set(&self) -> TopicSet {
        TopicSet {
            topics: self
                .leaves()
                .into_iter()
                .map(|t| Topic::new(t.short_name.clone(), t.description.clone()))
                .collect(),
        }
    }

    /// Parse the TOML topic document.
    pub fn from_toml(raw: &str) -> Result<Self, CorpusError> {
        let file: RawTopicFile =
            toml::from_str(raw).map_err(|e| CorpusError::MalformedTopics(e.to_string()))?;
        let topics = file
            .topics
            .into_iter()
            .map(convert_raw_topic)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(topics)
    }

    pub fn to_toml(&self) -> String {
        let file = RawTopicFileOut {
            topics: self.topics.iter().map(to_raw_topic).collect(),
        };
        toml::to_string(&file).expect("topic set serializes")
    }
}

#[derive(Serialize)]
struct RawTopicFileOut {
    topics: Vec<RawTopic>,
}

fn to_raw_topic(t: &Topic) -> RawTopic {
    RawTopic {
        short_name: t.short_name.clone(),
        description: Some(t.description.clone()),
        subtopics: t.subtopics.iter().map(to_raw_topic).collect(),
    }
}

fn convert_raw_topic(raw: RawTopic) -> Result<Topic, CorpusError> {
    let description = raw
        .description
        .map(|d| d.trim().to_string())
        .filter(|d| !d.is_empty())
        .ok_or_else(|| CorpusError::MissingDescription(raw.short_name.clone()))?;
    let subtopics = raw
        .subtopics
        .into_iter()
        .map(convert_raw_topic)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Topic {
        short_name: raw.short_name.trim().to_string(),
        description,
        subtopics,
    })
}

/// Load a TOML topic file (`[[topics]]` entries with `short_name`,
/// `description` and optional `[[topics.subtopics]]`).
pub fn load_topics(path: &Path) -> Result<TopicSet, CorpusError> {
    TopicSet::from_toml(&read_to_string(path)?)
}
