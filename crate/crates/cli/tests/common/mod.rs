//! The demo corpus, its canned model answers and embeddings.
//!
//! `demo/` at the workspace root holds the same data as files; the
//! `demo_files_in_sync` test keeps them from drifting.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use topicfuse::annotator::parse::render_canonical;
use topicfuse::annotator::prompt::with_reminder;
use topicfuse::corpus::{to_jsonl, TextItem, Topic, TopicSet};
use topicfuse::stubserver::Fixture;
use topicfuse::build_prompt;

pub const MODELS: [&str; 3] = ["m1", "m2", "m3"];
pub const TOPICS: [&str; 2] = ["sleep", "diet"];
pub const TEXT_IDS: [&str; 6] = ["t1", "t2", "t3", "t4", "t5", "t6"];
pub const DIM: usize = 8;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn demo_dir() -> PathBuf {
    workspace_root().join("demo")
}

pub fn corpus() -> Vec<TextItem> {
    let item = |id: &str, text: &str, group: Option<&str>| TextItem {
        id: id.into(),
        text: text.into(),
        group: group.map(Into::into),
    };
    vec![
        item(
            "t1",
            "I cannot sleep anymore and I am tired all day. Dinner was a sandwich, I ate a little.",
            Some("forum_a"),
        ),
        item(
            "t2",
            "Restless nights again, awake until dawn. I ate a little at lunch and nothing after.",
            Some("forum_a"),
        ),
        item(
            "t3",
            "Restless nights this week and I feel tired all day. Skipped lunch because of a meeting.",
            Some("forum_a"),
        ),
        item("t4", "Tired all day after the trip, nothing else to report.", Some("forum_b")),
        item(
            "t5",
            "Cutting calories hard this month and skipped lunch twice already.",
            Some("forum_b"),
        ),
        item("t6", "Fasting for days before the event. Slept fine though.", None),
    ]
}

pub fn topics() -> TopicSet {
    TopicSet::new(vec![
        Topic::new("sleep", "Trouble sleeping, insomnia or being awake at night"),
        Topic::new("diet", "Restrictive dieting, skipping meals or fasting"),
    ])
    .expect("valid topics")
}

/// Intended answer of one model for one text: `None` is a "no", otherwise
/// the evidence phrases of a "yes".
pub struct Answer {
    pub model: &'static str,
    pub text: &'static str,
    pub sleep: Option<&'static [&'static str]>,
    pub diet: Option<&'static [&'static str]>,
}

const fn a(
    model: &'static str,
    text: &'static str,
    sleep: Option<&'static [&'static str]>,
    diet: Option<&'static [&'static str]>,
) -> Answer {
    Answer {
        model,
        text,
        sleep,
        diet,
    }
}

pub const ANSWERS: [Answer; 18] = [
    a("m1", "t1", Some(&["cannot sleep", "tired all day"]), None),
    a("m2", "t1", Some(&["awake until dawn"]), None),
    a("m3", "t1", Some(&["cannot sleep"]), Some(&["ate a little"])),
    a("m1", "t2", Some(&["restless nights"]), Some(&["ate a little"])),
    a("m2", "t2", Some(&["awake until dawn"]), Some(&["ate a little"])),
    a("m3", "t2", Some(&["restless nights"]), Some(&["ate a little"])),
    a("m1", "t3", Some(&["restless nights"]), Some(&["skipped lunch"])),
    a("m2", "t3", None, None),
    a("m3", "t3", Some(&["tired all day"]), None),
    a("m1", "t4", None, None),
    a("m2", "t4", None, None),
    a("m3", "t4", Some(&["tired all day"]), None),
    a("m1", "t5", None, Some(&["cutting calories"])),
    a("m2", "t5", None, Some(&["skipped lunch"])),
    a("m3", "t5", None, Some(&["cutting calories"])),
    a("m1", "t6", Some(&[]), None),
    a("m2", "t6", None, Some(&["fasting for days"])),
    a("m3", "t6", None, None),
];

pub fn answer(model: &str, text: &str) -> &'static Answer {
    ANSWERS
        .iter()
        .find(|x| x.model == model && x.text == text)
        .expect("answer in table")
}

fn unit(pairs: &[(usize, f32)]) -> Vec<f32> {
    let mut v = vec![0.0; DIM];
    for &(i, x) in pairs {
        v[i] = x;
    }
    v
}

/// Every embedded string with its vector. Sleep lives in the (e0, e1) plane,
/// diet in (e2, e3); the empty string leans 0.28 towards sleep.
pub fn embeddings() -> Vec<(String, Vec<f32>)> {
    let t = topics();
    let descriptions = [
        (t.topics()[0].description.as_str(), unit(&[(0, 1.0)])),
        (t.topics()[1].description.as_str(), unit(&[(2, 1.0)])),
    ];
    let phrases = [
        ("", unit(&[(0, 0.28), (7, 0.96)])),
        ("cannot sleep", unit(&[(0, 1.0)])),
        ("awake until dawn", unit(&[(0, 0.96), (1, 0.28)])),
        ("restless nights", unit(&[(0, 0.8), (1, 0.6)])),
        ("tired all day", unit(&[(0, 0.6), (1, 0.8)])),
        ("ate a little", unit(&[(2, 0.28), (3, 0.96)])),
        ("skipped lunch", unit(&[(2, 0.6), (3, 0.8)])),
        ("cutting calories", unit(&[(2, 0.8), (3, 0.6)])),
        ("fasting for days", unit(&[(2, 0.96), (3, 0.28)])),
    ];
    descriptions
        .into_iter()
        .chain(phrases)
        .map(|(s, v)| (s.to_string(), v))
        .collect()
}

fn quoted(phrases: &[&str], quote: char) -> String {
    phrases
        .iter()
        .map(|p| format!("{quote}{p}{quote}"))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Each model answers in its own dialect of the requested format.
pub fn render(ans: &Answer) -> String {
    let slots = [(TOPICS[0], ans.sleep), (TOPICS[1], ans.diet)];
    match ans.model {
        "m1" => render_canonical(
            &slots
                .iter()
                .map(|(n, p)| (*n, p.is_some(), p.unwrap_or(&[]).iter().map(|s| s.to_string()).collect()))
                .collect::<Vec<_>>(),
        ),
        "m2" => slots
            .iter()
            .enumerate()
            .map(|(k, (n, p))| match p {
                Some(p) => format!("{}. {n}: Yes. Related phrases: {}\n", k + 1, quoted(p, '\'')),
                None => format!("{}. {n}: No.\n", k + 1),
            })
            .collect(),
        _ => slots
            .iter()
            .enumerate()
            .map(|(k, (n, p))| match p {
                Some(p) => format!("**({}) {n}:** yes; related phrases if any: {}\n", k + 1, quoted(p, '"')),
                None => format!("**({}) {n}:** no\n", k + 1),
            })
            .collect(),
    }
}

/// The model whose first answer for a text is off-format, forcing a re-query.
pub const OFF_FORMAT: (&str, &str) = ("m2", "t5");

pub fn fixture() -> Fixture {
    let topics = topics();
    let mut f = Fixture::default();
    for item in corpus() {
        let prompt = build_prompt(&topics, &item);
        for model in MODELS {
            let content = render(answer(model, &item.id));
            if (model, item.id.as_str()) == OFF_FORMAT {
                f.add_completion(model, &prompt, "Sorry, I would rather not say.");
                f.add_completion(model, &with_reminder(&prompt), &content);
            } else {
                f.add_completion(model, &prompt, &content);
            }
        }
    }
    for (text, v) in embeddings() {
        f.add_embedding(&text, v);
    }
    f
}

pub fn gold_jsonl() -> String {
    let positives = [("sleep", "t1"), ("sleep", "t2"), ("sleep", "t3"), ("diet", "t3"), ("diet", "t5"), ("diet", "t6")];
    let mut out = String::new();
    for topic in TOPICS {
        for id in TEXT_IDS {
            let label = positives.contains(&(topic, id));
            out.push_str(&format!("{{\"text_id\":\"{id}\",\"topic\":\"{topic}\",\"label\":{label}}}\n"));
        }
    }
    out
}

pub fn config_toml(base_url: &str, seed: u64) -> String {
    let mut out = String::from(
        "topics = \"topics.toml\"\ngold = \"gold.jsonl\"\ncache_dir = \"cache\"\noutput_dir = \"runs\"\nsubset_ensembles = true\n\n[corpus]\npath = \"corpus.jsonl\"\n\n",
    );
    out.push_str(&format!("[bootstrap]\nresamples = 1000\nseed = {seed}\n\n"));
    for m in MODELS {
        out.push_str(&format!(
            "[[backends]]\nname = \"{m}\"\nendpoint = \"{base_url}/v1/chat/completions\"\nparallelism = 2\n\n[backends.retry]\nmax_retries = 1\nbase_delay_ms = 10\n\n"
        ));
    }
    out.push_str(&format!(
        "[embedding]\nname = \"mpnet\"\nendpoint = \"{base_url}/v1/embeddings\"\nbatch_size = 4\n"
    ));
    out
}

/// Demo inputs as file contents, keyed by file name.
pub fn demo_files(base_url: &str) -> Vec<(&'static str, String)> {
    vec![
        ("corpus.jsonl", to_jsonl(&corpus())),
        ("topics.toml", topics().to_toml()),
        ("gold.jsonl", gold_jsonl()),
        ("fixture.json", fixture().to_json() + "\n"),
        ("config.toml", config_toml(base_url, 7)),
    ]
}

pub const DEMO_BASE_URL: &str = "http://127.0.0.1:8765";

/// Write a runnable copy of the demo pointing at `base_url` into `dir`.
pub fn write_demo(dir: &Path, base_url: &str) -> PathBuf {
    for (name, contents) in demo_files(base_url) {
        fs::write(dir.join(name), contents).unwrap();
    }
    dir.join("config.toml")
}
