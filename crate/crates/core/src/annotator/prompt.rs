//! Labeling prompt construction.

use crate::corpus::{TextItem, TopicSet};

/// Appended to the prompt when a response could not be parsed at all.
pub const FORMAT_REMINDER: &str = "Answer strictly in the required format.";

fn sentence(description: &str) -> String {
    let trimmed = description.trim_end();
    let body = trimmed.strip_suffix('.').unwrap_or(trimmed);
    format!("{body}.")
}

/// Multi-topic labeling prompt. Topics are numbered from 1 in set order.
pub fn build_prompt(topics: &TopicSet, item: &TextItem) -> String {
    let mut out = String::from("Does the paragraph mention any of the following topics:\n");
    for (k, topic) in topics.topics().iter().enumerate() {
        out.push_str(&format!(
            "({}) {}: {}\n",
            k + 1,
            topic.short_name,
            sentence(&topic.description)
        ));
    }
    out.push_str("Return answer in format:\n");
    for (k, topic) in topics.topics().iter().enumerate() {
        out.push_str(&format!(
            "({}) {}: [yes/no], related phrases if any:\n",
            k + 1,
            topic.short_name
        ));
    }
    out.push_str(&format!("Paragraph: `{}`", item.text));
    out
}

/// The prompt re-sent after an unparseable response.
pub fn with_reminder(prompt: &str) -> String {
    format!("{prompt}\n{FORMAT_REMINDER}")
}
