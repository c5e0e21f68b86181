//! JSON-over-HTTP POST with bounded retries and exponential backoff.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("backend {endpoint} unavailable after {attempts} attempts: {last_error}")]
    BackendUnavailable {
        endpoint: String,
        attempts: u32,
        last_error: String,
    },
    #[error("backend {endpoint} returned HTTP {status}: {excerpt}")]
    BadStatus {
        endpoint: String,
        status: u16,
        excerpt: String,
    },
    #[error("backend {endpoint} sent an unexpected body: {reason}")]
    MalformedResponse { endpoint: String, reason: String },
    #[error("environment variable {0} (named as an auth source) is not set")]
    MissingSecret(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub timeout_secs: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 250,
            max_delay_ms: 8_000,
            timeout_secs: 120,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

const EXCERPT_LEN: usize = 200;

fn excerpt(body: &str) -> String {
    let mut end = body.len().min(EXCERPT_LEN);
    while !body.is_char_boundary(end) {
        end -= 1;
    }
    body[..end].to_string()
}

/// Shared HTTP client. Cloning is cheap and shares the request counter.
#[derive(Debug, Clone)]
pub struct Transport {
    client: reqwest::Client,
    retry: RetryPolicy,
    requests: Arc<AtomicUsize>,
}

impl Transport {
    pub fn new(retry: RetryPolicy) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(retry.timeout_secs))
            .build()
            .expect("http client builds");
        Self {
            client,
            retry,
            requests: Arc::new(AtomicUsize::new(0)),
        }
    }

    /// Number of HTTP requests attempted through this transport.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    /// POST `body` to `url`. Connection failures, timeouts, 429 and 5xx are
    /// retried; other non-success statuses fail immediately.
    pub async fn post_json<B: Serialize + ?Sized>(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &B,
    ) -> Result<Value, TransportError> {
        let mut attempt = 0u32;
        loop {
            self.requests.fetch_add(1, Ordering::Relaxed);
            let mut request = self.client.post(url).json(body);
            if let Some(token) = bearer {
                request = request.bearer_auth(token);
            }
            let outcome = match request.send().await {
                Ok(response) => {
                    let status = response.status();
                    let text = response.text().await.unwrap_or_default();
                    if status.is_success() {
                        return serde_json::from_str(&text).map_err(|e| {
                            TransportError::MalformedResponse {
                                endpoint: url.to_string(),
                                reason: e.to_string(),
                            }
                        });
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    let err = TransportError::BadStatus {
                        endpoint: url.to_string(),
                        status: status.as_u16(),
                        excerpt: excerpt(&text),
                    };
                    if !retryable {
                        return Err(err);
                    }
                    err.to_string()
                }
                Err(e) => e.to_string(),
            };
            if attempt >= self.retry.max_retries {
                return Err(TransportError::BackendUnavailable {
                    endpoint: url.to_string(),
                    attempts: attempt + 1,
                    last_error: outcome,
                });
            }
            tracing::debug!(url, attempt, error = %outcome, "retrying request");
            tokio::time::sleep(self.retry.delay(attempt)).await;
            attempt += 1;
        }
    }
}

/// Resolve a bearer token from the environment variable named in config.
pub fn resolve_secret(env_name: Option<&str>) -> Result<Option<String>, TransportError> {
    match env_name {
        None => Ok(None),
        Some(name) => std::env::var(name)
            .map(Some)
            .map_err(|_| TransportError::MissingSecret(name.to_string())),
    }
}
