//! Embedding backend client with an on-disk vector cache.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use super::{EmbeddingVector, RelevancyError};
use crate::transport::{resolve_secret, RetryPolicy, Transport};
use crate::util::{sha256_hex, truncate_words, write_atomic};

/// Maximum number of whitespace-delimited words sent to the embedding model.
pub const MAX_EMBED_WORDS: usize = 384;

pub const DEFAULT_EMBEDDING_MODEL: &str = "all-mpnet-base-v2";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingBackend {
    pub name: String,
    /// Full URL of the embedding route.
    pub endpoint: String,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_model() -> String {
    DEFAULT_EMBEDDING_MODEL.to_string()
}

fn default_batch() -> usize {
    32
}

fn default_parallelism() -> usize {
    2
}

impl EmbeddingBackend {
    pub fn new(name: impl Into<String>, endpoint: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            endpoint: endpoint.into(),
            model: default_model(),
            auth_env: None,
            batch_size: default_batch(),
            parallelism: default_parallelism(),
            retry: RetryPolicy::default(),
        }
    }
}

/// `{root}/emb/{backend}/{sha256(text)}.bin`, little-endian f32.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    root: PathBuf,
}

impl EmbeddingCache {
    pub fn new(cache_dir: impl AsRef<Path>) -> Self {
        Self {
            root: cache_dir.as_ref().join("emb"),
        }
    }

    pub fn path(&self, backend: &str, text: &str) -> PathBuf {
        self.root
            .join(backend)
            .join(format!("{}.bin", sha256_hex(text)))
    }

    pub fn get(&self, backend: &str, text: &str) -> Option<EmbeddingVector> {
        let raw = fs::read(self.path(backend, text)).ok()?;
        if raw.len() % 4 != 0 || raw.is_empty() {
            return None;
        }
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        EmbeddingVector::new(values).ok()
    }

    pub fn put(&self, backend: &str, text: &str, v: &EmbeddingVector) -> std::io::Result<()> {
        let bytes: Vec<u8> = v.values().iter().flat_map(|x| x.to_le_bytes()).collect();
        write_atomic(&self.path(backend, text), &bytes)
    }
}

/// Embeddings keyed by the (already truncated) text they were computed for.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    vectors: HashMap<String, EmbeddingVector>,
    dimension: Option<usize>,
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, text: &str, v: EmbeddingVector) -> Result<(), RelevancyError> {
        let key = truncate_words(text, MAX_EMBED_WORDS).to_string();
        match self.dimension {
            Some(d) if d != v.dim() => {
                return Err(RelevancyError::DimensionMismatch {
                    expected: d,
                    got: v.dim(),
                })
            }
            _ => self.dimension = Some(v.dim()),
        }
        self.vectors.insert(key, v);
        Ok(())
    }

    /// Vector for `text`, looked up by its truncated form.
    pub fn get(&self, text: &str) -> Result<&EmbeddingVector, RelevancyError> {
        let key = truncate_words(text, MAX_EMBED_WORDS);
        self.vectors
            .get(key)
            .ok_or_else(|| RelevancyError::MissingEmbedding(key.chars().take(60).collect()))
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingClient {
    backend: EmbeddingBackend,
    transport: Transport,
    cache: EmbeddingCache,
    token: Option<String>,
}

impl EmbeddingClient {
    pub fn new(backend: EmbeddingBackend, cache: EmbeddingCache) -> Result<Self, RelevancyError> {
        let token = resolve_secret(backend.auth_env.as_deref())?;
        let transport = Transport::new(backend.retry);
        Ok(Self {
            backend,
            transport,
            cache,
            token,
        })
    }

    pub fn backend(&self) -> &EmbeddingBackend {
        &self.backend
    }

    pub fn requests_sent(&self) -> usize {
        self.transport.requests_sent()
    }

    async fn request_batch(&self, batch: &[String]) -> Result<Vec<EmbeddingVector>, RelevancyError> {
        let body = json!({ "model": self.backend.model, "input": batch });
        let reply = self
            .transport
            .post_json(&self.backend.endpoint, self.token.as_deref(), &body)
            .await?;
        let data = reply
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| RelevancyError::MalformedEmbedding("missing `data` array".into()))?;
        if data.len() != batch.len() {
            return Err(RelevancyError::MalformedEmbedding(format!(
                "{} embeddings for {} inputs",
                data.len(),
                batch.len()
            )));
        }
        data.iter()
            .map(|d| {
                let values = d
                    .get("embedding")
                    .and_then(|e| e.as_array())
                    .ok_or_else(|| RelevancyError::MalformedEmbedding("missing `embedding`".into()))?
                    .iter()
                    .map(|x| {
                        x.as_f64().map(|f| f as f32).ok_or_else(|| {
                            RelevancyError::MalformedEmbedding("non-numeric entry".into())
                        })
                    })
                    .collect::<Result<Vec<f32>, _>>()?;
                EmbeddingVector::new(values)
            })
            .collect()
    }

    /// Embed a set of texts (each truncated to its first 384 words), serving
    /// what it can from the cache and batching the rest.
    pub async fn embed_all<'a, I>(&self, texts: I) -> Result<EmbeddingStore, RelevancyError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let unique: BTreeSet<String> = texts
            .into_iter()
            .map(|t| truncate_words(t, MAX_EMBED_WORDS).to_string())
            .collect();
        let mut store = EmbeddingStore::new();
        let mut missing = Vec::new();
        for text in unique {
            match self.cache.get(&self.backend.name, &text) {
                Some(v) => store.insert(&text, v)?,
                None => missing.push(text),
            }
        }
        let semaphore = Semaphore::new(self.backend.parallelism.max(1));
        let batches: Vec<&[String]> = missing.chunks(self.backend.batch_size.max(1)).collect();
        let results = join_all(batches.iter().map(|batch| async {
            let _permit = semaphore.acquire().await.expect("semaphore open");
            self.request_batch(batch).await
        }))
        .await;
        for (batch, result) in batches.iter().zip(results) {
            for (text, v) in batch.iter().zip(result?) {
                if let Err(e) = self.cache.put(&self.backend.name, text, &v) {
                    tracing::warn!(error = %e, "could not store embedding");
                }
                store.insert(text, v)?;
            }
        }
        Ok(store)
    }

    pub async fn embed(&self, text: &str) -> Result<EmbeddingVector, RelevancyError> {
        let store = self.embed_all([text]).await?;
        store.get(text).cloned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_is_little_endian_f32() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::new(dir.path());
        let v = EmbeddingVector::new(vec![1.0, -0.5, 0.25]).unwrap();
        cache.put("mpnet", "hello", &v).unwrap();
        let path = dir
            .path()
            .join("emb/mpnet")
            .join(format!("{}.bin", sha256_hex("hello")));
        let raw = fs::read(&path).unwrap();
        assert_eq!(raw.len(), 12);
        assert_eq!(&raw[..4], &1.0f32.to_le_bytes());
        assert_eq!(cache.get("mpnet", "hello"), Some(v));
    }

    #[test]
    fn store_looks_up_truncated_text() {
        let mut store = EmbeddingStore::new();
        let long: String = (0..500).map(|i| format!("w{i} ")).collect();
        store
            .insert(&long, EmbeddingVector::new(vec![1.0, 0.0]).unwrap())
            .unwrap();
        let cut = truncate_words(&long, MAX_EMBED_WORDS);
        assert_eq!(store.get(cut).unwrap(), store.get(&long).unwrap());
        assert!(store
            .insert("x", EmbeddingVector::new(vec![1.0, 0.0, 0.0]).unwrap())
            .is_err());
    }
}
