//! Parsing of per-topic `yes/no` answers and evidence phrases out of free-form
//! model output.
//!
//! Topic lines are located by short name, first as numbered entries
//! (`(3) binge:`), then as a bare case-insensitive word anywhere. The text
//! between one located topic and the next is that topic's answer segment.

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TopicSet;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "detail")]
pub enum ParseWarning {
    /// The topic never appeared in the response.
    MissingTopic,
    /// The topic line held something other than yes/no.
    UnrecognizedLabel(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no topic line recognized in response")]
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTopic {
    pub topic: String,
    pub label: bool,
    pub phrases: Vec<String>,
    pub warning: Option<ParseWarning>,
}

#[derive(Debug, Clone, Copy)]
struct Marker {
    topic: usize,
    start: usize,
    end: usize,
}

fn numbered_pattern(name: &str) -> Regex {
    Regex::new(&format!(
        r"(?i)(?:\(\s*\d+\s*\)|\b\d+[.)])\s*[*_`]*\s*{}\s*[*_`]*\s*:",
        regex::escape(name)
    ))
    .expect("valid pattern")
}

fn loose_patterns(name: &str) -> (Regex, Regex) {
    let escaped = regex::escape(name);
    (
        Regex::new(&format!(r"(?i)\b{escaped}\b[*_`]*\s*:")).expect("valid pattern"),
        Regex::new(&format!(r"(?i)\b{escaped}\b[*_`]*")).expect("valid pattern"),
    )
}

fn starts_with_answer(rest: &str) -> bool {
    leading_word(rest).is_some_and(|w| w == "yes" || w == "no")
}

/// First alphabetic word after any opening brackets, quotes or emphasis.
fn leading_word(segment: &str) -> Option<String> {
    let s = segment.trim_start_matches(|c: char| c.is_whitespace() || "[(*_`\"':-–".contains(c));
    let word: String = s.chars().take_while(|c| c.is_alphabetic()).collect();
    (!word.is_empty()).then(|| word.to_lowercase())
}

fn locate(content: &str, topics: &TopicSet) -> Vec<Marker> {
    let mut markers = Vec::new();
    for (idx, topic) in topics.topics().iter().enumerate() {
        let numbered: Vec<_> = numbered_pattern(&topic.short_name)
            .find_iter(content)
            .collect();
        // skip echoed format lines such as "(1) binge: [yes/no]" if a real
        // answer for the same topic follows
        let chosen = numbered
            .iter()
            .find(|m| starts_with_answer(&content[m.end()..]) && !content[m.end()..].trim_start().starts_with("[yes/no]"))
            .or_else(|| numbered.first());
        if let Some(m) = chosen {
            markers.push(Marker {
                topic: idx,
                start: m.start(),
                end: m.end(),
            });
            continue;
        }
        let (with_colon, bare) = loose_patterns(&topic.short_name);
        if let Some(m) = with_colon.find(content).or_else(|| bare.find(content)) {
            markers.push(Marker {
                topic: idx,
                start: m.start(),
                end: m.end(),
            });
        }
    }
    markers.sort_by_key(|m| m.start);
    markers
}

fn trailing_number_pattern() -> Regex {
    Regex::new(r"(?:\(\s*\d+\s*\)|\b\d+[.)])\s*$").expect("valid pattern")
}

/// Quoted spans: double quotes, curly quotes, and single quotes that open
/// after a delimiter and close before one (so apostrophes inside words
/// survive).
fn quoted_spans(tail: &str) -> Vec<String> {
    let patterns = [
        r#""([^"]+)""#,
        r"“([^”]+)”",
        r"‘([^’]+)’",
        r"(?:^|[\s,;:(\[])'(.+?)'(?:$|[\s,;.:)\]])",
    ];
    let mut found: Vec<(usize, String)> = Vec::new();
    for p in patterns {
        let re = Regex::new(p).expect("valid pattern");
        for cap in re.captures_iter(tail) {
            let m = cap.get(1).expect("group 1");
            found.push((m.start(), m.as_str().to_string()));
        }
    }
    found.sort_by_key(|(pos, _)| *pos);
    found.into_iter().map(|(_, s)| s).collect()
}

const TRIM_CHARS: &[char] = &['"', '\'', '`', '“', '”', '‘', '’', '*', '-', '•', '[', ']'];

fn clean_phrase(raw: &str) -> Option<String> {
    let s = raw
        .trim()
        .trim_matches(|c: char| c.is_whitespace() || TRIM_CHARS.contains(&c))
        .trim_end_matches('.')
        .trim();
    let lower = s.to_lowercase();
    if s.is_empty() || lower == "none" || lower == "n/a" || lower == "null" {
        None
    } else {
        Some(s.to_string())
    }
}

fn extract_phrases(segment: &str, label_word_end: usize) -> Vec<String> {
    let marker = Regex::new(r"(?i)related phrases(?:\s*if any)?").expect("valid pattern");
    let tail = match marker.find(segment) {
        Some(m) => segment[m.end()..]
            .trim_start_matches(|c: char| c.is_whitespace() || ":-–".contains(c)),
        None => segment[label_word_end..]
            .trim_start_matches(|c: char| c.is_whitespace() || "]).,:;-–".contains(c)),
    };
    let quoted = quoted_spans(tail);
    let raw: Vec<String> = if quoted.is_empty() {
        tail.split([',', ';', '\n']).map(str::to_string).collect()
    } else {
        quoted
    };
    raw.iter().filter_map(|p| clean_phrase(p)).collect()
}

fn parse_segment(segment: &str) -> (bool, Vec<String>, Option<ParseWarning>) {
    let trimmed_len = segment.len()
        - segment
            .trim_start_matches(|c: char| c.is_whitespace() || "[(*_`\"':-–".contains(c))
            .len();
    match leading_word(segment) {
        Some(word) if word == "yes" || word == "no" => {
            let end = trimmed_len + word.len();
            let phrases = extract_phrases(segment, end);
            (word == "yes", phrases, None)
        }
        other => {
            let shown = other.unwrap_or_else(|| segment.trim().chars().take(20).collect());
            let phrases = extract_phrases(segment, trimmed_len);
            (false, phrases, Some(ParseWarning::UnrecognizedLabel(shown)))
        }
    }
}

/// Parse one response against the prompted topics, returning one entry per
/// topic in set order.
pub fn parse_response(content: &str, topics: &TopicSet) -> Result<Vec<ParsedTopic>, ParseError> {
    let markers = locate(content, topics);
    if markers.is_empty() {
        return Err(ParseError::Unparseable);
    }
    let trailing = trailing_number_pattern();
    let mut parsed: Vec<Option<ParsedTopic>> = vec![None; topics.len()];
    for (i, marker) in markers.iter().enumerate() {
        let stop = markers.get(i + 1).map_or(content.len(), |next| next.start);
        let segment = &content[marker.end..stop.max(marker.end)];
        let segment = match trailing.find(segment) {
            Some(m) => &segment[..m.start()],
            None => segment,
        };
        let (label, phrases, warning) = parse_segment(segment);
        parsed[marker.topic] = Some(ParsedTopic {
            topic: topics.topics()[marker.topic].short_name.clone(),
            label,
            phrases,
            warning,
        });
    }
    Ok(parsed
        .into_iter()
        .zip(topics.topics())
        .map(|(p, topic)| {
            p.unwrap_or_else(|| ParsedTopic {
                topic: topic.short_name.clone(),
                label: false,
                phrases: Vec::new(),
                warning: Some(ParseWarning::MissingTopic),
            })
        })
        .collect())
}

/// Render answers in the canonical response format that [`parse_response`]
/// reads back exactly.
pub fn render_canonical(answers: &[(&str, bool, Vec<String>)]) -> String {
    let mut out = String::new();
    for (k, (name, label, phrases)) in answers.iter().enumerate() {
        let quoted: Vec<String> = phrases.iter().map(|p| format!("\"{p}\"")).collect();
        out.push_str(&format!(
            "({}) {}: {}, related phrases if any: {}\n",
            k + 1,
            name,
            if *label { "yes" } else { "no" },
            quoted.join(", ")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Topic;
    use proptest::prelude::*;

    fn set(names: &[&str]) -> TopicSet {
        TopicSet::new(names.iter().map(|n| Topic::new(*n, "desc")).collect()).unwrap()
    }

    #[test]
    fn inline_answers_with_single_quotes() {
        let topics = set(&["bodyhate", "feargain"]);
        let content = "(1) bodyhate: yes, related phrases: 'wear baggy clothes to hide what I look like', 'too scared to talk to anyone' (2) feargain: yes, related phrases: 'I'm terrified of gaining'";
        let parsed = parse_response(content, &topics).unwrap();
        assert!(parsed[0].label);
        assert_eq!(
            parsed[0].phrases,
            vec![
                "wear baggy clothes to hide what I look like",
                "too scared to talk to anyone"
            ]
        );
        assert!(parsed[1].label);
        assert_eq!(parsed[1].phrases, vec!["I'm terrified of gaining"]);
        assert!(parsed.iter().all(|p| p.warning.is_none()));
    }

    #[test]
    fn plain_negatives() {
        let parsed = parse_response("(1) binge: no (2) calorie: no", &set(&["binge", "calorie"])).unwrap();
        assert!(parsed.iter().all(|p| !p.label && p.phrases.is_empty() && p.warning.is_none()));
    }

    #[test]
    fn refusal_is_unparseable() {
        assert_eq!(
            parse_response("I'm sorry, I can't help with that.", &set(&["binge", "calorie"])),
            Err(ParseError::Unparseable)
        );
    }

    #[test]
    fn label_variants() {
        let topics = set(&["a", "b", "c", "d"]);
        let content = "(1) a: [yes], related phrases if any: \"x\"\n(2) b: Yes. \"y\"\n(3) c: **no**\n(4) d: maybe, \"z\"";
        let parsed = parse_response(content, &topics).unwrap();
        assert!(parsed[0].label);
        assert_eq!(parsed[0].phrases, vec!["x"]);
        assert!(parsed[1].label);
        assert_eq!(parsed[1].phrases, vec!["y"]);
        assert!(!parsed[2].label);
        assert!(!parsed[3].label);
        assert_eq!(
            parsed[3].warning,
            Some(ParseWarning::UnrecognizedLabel("maybe".into()))
        );
    }

    #[test]
    fn comma_tail_fallback() {
        let topics = set(&["restrict", "loss"]);
        let content = "1. restrict: yes, related phrases if any: skipped lunch; only 500 calories, fasting.\n2. loss: no, related phrases if any: none";
        let parsed = parse_response(content, &topics).unwrap();
        assert_eq!(parsed[0].phrases, vec!["skipped lunch", "only 500 calories", "fasting"]);
        assert!(parsed[1].phrases.is_empty());
    }

    #[test]
    fn missing_topic_flagged() {
        let parsed = parse_response("(1) binge: yes, \"ate a whole pizza\"", &set(&["binge", "crave"])).unwrap();
        assert!(parsed[0].label);
        assert!(!parsed[1].label);
        assert_eq!(parsed[1].warning, Some(ParseWarning::MissingTopic));
    }

    #[test]
    fn loose_match_without_numbers() {
        let topics = set(&["gain", "feargain"]);
        let content = "FearGain - yes, \"scared of the scale\"\nGain: no";
        let parsed = parse_response(content, &topics).unwrap();
        assert!(!parsed[0].label);
        assert!(parsed[1].label);
        assert_eq!(parsed[1].phrases, vec!["scared of the scale"]);
    }

    #[test]
    fn echoed_format_block_is_skipped() {
        let topics = set(&["binge"]);
        let content = "Return answer in format:\n(1) binge: [yes/no], related phrases if any:\nAnswer:\n(1) binge: yes, related phrases if any: \"ate everything\"";
        let parsed = parse_response(content, &topics).unwrap();
        assert!(parsed[0].label);
        assert_eq!(parsed[0].phrases, vec!["ate everything"]);
    }

    #[test]
    fn bullet_list_phrases() {
        let topics = set(&["exercise"]);
        let content = "(1) exercise: yes, related phrases if any:\n- went for a run\n- lifted weights";
        let parsed = parse_response(content, &topics).unwrap();
        assert_eq!(parsed[0].phrases, vec!["went for a run", "lifted weights"]);
    }

    proptest! {
        #[test]
        fn canonical_roundtrip(
            answers in proptest::collection::vec(
                (any::<bool>(), proptest::collection::vec(
                    "[a-z][a-z ]{0,18}[a-z]".prop_filter("reserved word", |s| s != "none" && s != "null"),
                    0..4,
                )),
                1..6,
            )
        ) {
            let names: Vec<String> = (0..answers.len()).map(|i| format!("topic_{i}")).collect();
            let topics = TopicSet::new(names.iter().map(|n| Topic::new(n.clone(), "d")).collect()).unwrap();
            let rows: Vec<(&str, bool, Vec<String>)> = names
                .iter()
                .zip(&answers)
                .map(|(n, (l, p))| (n.as_str(), *l, p.clone()))
                .collect();
            let parsed = parse_response(&render_canonical(&rows), &topics).unwrap();
            for (p, (_, label, phrases)) in parsed.iter().zip(&rows) {
                prop_assert_eq!(p.label, *label);
                prop_assert_eq!(&p.phrases, phrases);
                prop_assert!(p.warning.is_none());
            }
        }
    }
}
