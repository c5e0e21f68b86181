//! Run configuration: one TOML document naming inputs, backends and outputs.
//!
//! Relative paths resolve against the directory holding the config file.
//! Credentials never appear in the file; backends name an environment
//! variable (`auth_env`) instead.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{DEFAULT_OUTLIER_FRACTION, DEFAULT_RESAMPLES};
use crate::annotator::client::{is_valid_backend_name, ModelBackend};
use crate::corpus::CorpusFormat;
use crate::relevancy::embedding::EmbeddingBackend;
use crate::util::sha256_hex;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("key {0:?} looks like an inline credential; name an environment variable with `auth_env` instead")]
    InlineSecret(String),
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub path: PathBuf,
    /// Inferred from the file extension when absent.
    #[serde(default)]
    pub format: Option<CorpusFormat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: DEFAULT_RESAMPLES,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSource,
    pub topics: PathBuf,
    pub backends: Vec<ModelBackend>,
    pub embedding: EmbeddingBackend,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_outlier_threshold")]
    pub outlier_threshold: f64,
    #[serde(default = "default_failure_fraction")]
    pub max_failure_fraction: f64,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    /// JSONL of `{text_id, topic, label}` records.
    #[serde(default)]
    pub gold: Option<PathBuf>,
    /// Also evaluate the ensemble of every model subset of size ≥ 2.
    #[serde(default)]
    pub subset_ensembles: bool,
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_outlier_threshold() -> f64 {
    DEFAULT_OUTLIER_FRACTION
}

fn default_failure_fraction() -> f64 {
    0.01
}

const SECRET_HINTS: &[&str] = &["api_key", "apikey", "secret", "password", "bearer", "authorization"];

fn looks_like_secret(key: &str) -> bool {
    let k = key.to_ascii_lowercase();
    k == "token" || k == "key" || SECRET_HINTS.iter().any(|h| k.contains(h))
}

fn find_inline_secret(value: &toml::Value) -> Option<String> {
    match value {
        toml::Value::Table(t) => t.iter().find_map(|(k, v)| {
            if looks_like_secret(k) {
                Some(k.clone())
            } else {
                find_inline_secret(v)
            }
        }),
        toml::Value::Array(items) => items.iter().find_map(find_inline_secret),
        _ => None,
    }
}

impl RunConfig {
    pub fn from_toml(raw: &str) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse {
            path: PathBuf::from("<config>"),
            message,
        };
        let value: toml::Value = toml::from_str(raw).map_err(|e| parse_err(e.to_string()))?;
        if let Some(key) = find_inline_secret(&value) {
            return Err(ConfigError::InlineSecret(key));
        }
        toml::from_str(raw).map_err(|e| parse_err(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Structural checks that do not touch the filesystem.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.backends.len() < 2 {
            out.push(format!("at least 2 backends are required, got {}", self.backends.len()));
        }
        let mut seen = HashSet::new();
        for b in &self.backends {
            if !is_valid_backend_name(&b.name) {
                out.push(format!("backend name {:?} is not usable as a directory name", b.name));
            }
            if !seen.insert(b.name.as_str()) {
                out.push(format!("backend name {:?} appears twice", b.name));
            }
            if b.decoding.temperature.is_nan() || b.decoding.temperature < 0.0 {
                out.push(format!("backend {:?}: temperature must be >= 0", b.name));
            }
            if b.decoding.max_tokens == 0 {
                out.push(format!("backend {:?}: max_tokens must be positive", b.name));
            }
            if b.parallelism == 0 {
                out.push(format!("backend {:?}: parallelism must be positive", b.name));
            }
            if reqwest::Url::parse(&b.endpoint).is_err() {
                out.push(format!("backend {:?}: endpoint {:?} is not a URL", b.name, b.endpoint));
            }
        }
        let e = &self.embedding;
        if !is_valid_backend_name(&e.name) {
            out.push(format!("embedding name {:?} is not usable as a directory name", e.name));
        }
        if reqwest::Url::parse(&e.endpoint).is_err() {
            out.push(format!("embedding endpoint {:?} is not a URL", e.endpoint));
        }
        if e.batch_size == 0 || e.parallelism == 0 {
            out.push("embedding batch_size and parallelism must be positive".into());
        }
        if self.outlier_threshold.is_nan() || self.outlier_threshold <= 0.0 {
            out.push(format!("outlier_threshold must be > 0, got {}", self.outlier_threshold));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            out.push(format!(
                "max_failure_fraction must lie in [0, 1], got {}",
                self.max_failure_fraction
            ));
        }
        if self.bootstrap.resamples < 100 {
            out.push(format!(
                "bootstrap.resamples must be at least 100, got {}",
                self.bootstrap.resamples
            ));
        }
        if self.corpus.format.is_none() && format_from_extension(&self.corpus.path).is_none() {
            out.push(format!(
                "cannot infer corpus format from {:?}; set corpus.format",
                self.corpus.path
            ));
        }
        out
    }
}

fn format_from_extension(path: &Path) -> Option<CorpusFormat> {
    path.extension()?.to_str()?.parse().ok()
}

/// A parsed config together with where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    digest: String,
}

impl LoadedConfig {
    /// Parse, validate and fingerprint a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config = RunConfig::from_toml(&raw).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Self::new(config, base_dir)
    }

    pub fn new(config: RunConfig, base_dir: PathBuf) -> Result<Self, ConfigError> {
        let mut problems = config.problems();
        let mut loaded = Self {
            config,
            base_dir,
            digest: String::new(),
        };
        let mut inputs = vec![loaded.corpus_path(), loaded.topics_path()];
        inputs.extend(loaded.gold_path());
        for p in &inputs {
            if !p.is_file() {
                problems.push(format!("{} does not exist", p.display()));
            }
        }
        if !problems.is_empty() {
            return Err(ConfigError::Invalid(problems));
        }
        loaded.digest = loaded.compute_digest()?;
        Ok(loaded)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn corpus_path(&self) -> PathBuf {
        self.resolve(&self.config.corpus.path)
    }

    pub fn corpus_format(&self) -> CorpusFormat {
        self.config
            .corpus
            .format
            .or_else(|| format_from_extension(&self.config.corpus.path))
            .expect("validated at load")
    }

    pub fn topics_path(&self) -> PathBuf {
        self.resolve(&self.config.topics)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.resolve(&self.config.cache_dir)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output_dir)
    }

    pub fn gold_path(&self) -> Option<PathBuf> {
        self.config.gold.as_deref().map(|p| self.resolve(p))
    }

    pub fn model_names(&self) -> Vec<String> {
        self.config.backends.iter().map(|b| b.name.clone()).collect()
    }

    /// SHA-256 over the parsed config and the bytes of every input file.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn compute_digest(&self) -> Result<String, ConfigError> {
        let mut material = serde_json::to_string(&self.config).expect("config serializes");
        let mut inputs = vec![self.corpus_path(), self.topics_path()];
        inputs.extend(self.gold_path());
        for p in inputs {
            let bytes = fs::read(&p).map_err(|source| ConfigError::Io { path: p, source })?;
            material.push('\n');
            material.push_str(&sha256_hex(bytes));
        }
        Ok(sha256_hex(material))
    }
}
