//! Chat-completion backend client with a content-addressed response cache.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::transport::{resolve_secret, RetryPolicy, Transport, TransportError};
use crate::util::{sha256_hex, write_atomic};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

/// One labeling model reachable over the chat-completion protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBackend {
    pub name: String,
    /// Full URL of the chat-completion route.
    pub endpoint: String,
    /// Value sent as `model`; defaults to `name`.
    #[serde(default)]
    pub model: Option<String>,
    /// Environment variable holding a bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub decoding: Decoding,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_parallelism() -> usize {
    4
}

/// Directory names that backends may not use inside the cache root.
pub const RESERVED_BACKEND_NAMES: &[&str] = &["emb"];

pub fn is_valid_backend_name(name: &str) -> bool {
    !name.is_empty()
        && !name.starts_with('.')
        && !RESERVED_BACKEND_NAMES.contains(&name)
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
}

impl ModelBackend {
    pub fn new(name: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            endpoint: endpoint.into(),
            model: None,
            auth_env: None,
            decoding: Decoding::default(),
            parallelism: default_parallelism(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn model_id(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.name)
    }

    /// Cache key over backend name, prompt and decoding parameters.
    pub fn cache_key(&self, prompt: &str) -> String {
        #[derive(Serialize)]
        struct KeyMaterial<'a> {
            backend: &'a str,
            prompt: &'a str,
            temperature: f64,
            max_tokens: u32,
        }
        let material = KeyMaterial {
            backend: &self.name,
            prompt,
            temperature: self.decoding.temperature,
            max_tokens: self.decoding.max_tokens,
        };
        sha256_hex(serde_json::to_vec(&material).expect("key material serializes"))
    }
}

/// Verbatim model output for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub model: String,
    pub text_id: String,
    pub content: String,
    pub retrieved_at: DateTime<Utc>,
    pub from_cache: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedResponse {
    pub prompt_digest: String,
    pub content: String,
    pub retrieved_at: DateTime<Utc>,
}

/// `{root}/{backend}/{key}.json`, one file per response.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, backend: &str, key: &str) -> PathBuf {
        self.root.join(backend).join(format!("{key}.json"))
    }

    pub fn get(&self, backend: &str, key: &str) -> Option<CachedResponse> {
        let raw = fs::read(self.path(backend, key)).ok()?;
        serde_json::from_slice(&raw).ok()
    }

    pub fn put(&self, backend: &str, key: &str, entry: &CachedResponse) -> std::io::Result<()> {
        let body = serde_json::to_vec_pretty(entry).expect("cache entry serializes");
        write_atomic(&self.path(backend, key), &body)
    }

    /// Number of stored entries for a backend.
    pub fn len(&self, backend: &str) -> usize {
        fs::read_dir(self.root.join(backend))
            .map(|d| {
                d.filter_map(Result::ok)
                    .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                    .count()
            })
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct ChatClient {
    backend: ModelBackend,
    transport: Transport,
    cache: ResponseCache,
    token: Option<String>,
}

impl ChatClient {
    pub fn new(backend: ModelBackend, cache: ResponseCache) -> Result<Self, TransportError> {
        let token = resolve_secret(backend.auth_env.as_deref())?;
        let transport = Transport::new(backend.retry);
        Ok(Self {
            backend,
            transport,
            cache,
            token,
        })
    }

    pub fn backend(&self) -> &ModelBackend {
        &self.backend
    }

    pub fn requests_sent(&self) -> usize {
        self.transport.requests_sent()
    }

    /// Cached response if the key matches, otherwise a fresh request that is
    /// then stored.
    pub async fn query(&self, text_id: &str, prompt: &str) -> Result<RawResponse, TransportError> {
        let key = self.backend.cache_key(prompt);
        if let Some(hit) = self.cache.get(&self.backend.name, &key) {
            return Ok(RawResponse {
                model: self.backend.name.clone(),
                text_id: text_id.to_string(),
                content: hit.content,
                retrieved_at: hit.retrieved_at,
                from_cache: true,
            });
        }
        let body = json!({
            "model": self.backend.model_id(),
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.backend.decoding.temperature,
            "max_tokens": self.backend.decoding.max_tokens,
        });
        let reply = self
            .transport
            .post_json(&self.backend.endpoint, self.token.as_deref(), &body)
            .await?;
        let content = reply
            .pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .ok_or_else(|| TransportError::MalformedResponse {
                endpoint: self.backend.endpoint.clone(),
                reason: "missing choices[0].message.content".into(),
            })?
            .to_string();
        let entry = CachedResponse {
            prompt_digest: sha256_hex(prompt),
            content,
            retrieved_at: Utc::now(),
        };
        if let Err(e) = self.cache.put(&self.backend.name, &key, &entry) {
            tracing::warn!(backend = %self.backend.name, error = %e, "could not store response");
        }
        Ok(RawResponse {
            model: self.backend.name.clone(),
            text_id: text_id.to_string(),
            content: entry.content,
            retrieved_at: entry.retrieved_at,
            from_cache: false,
        })
    }
}
