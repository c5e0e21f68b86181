//! Deterministic mock of the chat-completion and embedding endpoints.
//!
//! Completions are looked up by [`request_digest`] of (model, prompt);
//! embeddings by their input text. Anything else gets a 404 that echoes the
//! digest, so a missing fixture entry is easy to add.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::oneshot;

use crate::util::sha256_hex;

pub const CHAT_PATH: &str = "/v1/chat/completions";
pub const EMBEDDINGS_PATH: &str = "/v1/embeddings";

#[derive(Debug, Error)]
pub enum StubError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed fixture: {0}")]
    Fixture(String),
}

/// Digest identifying a chat request in a fixture.
pub fn request_digest(model: &str, prompt: &str) -> String {
    sha256_hex(format!("{model}\u{0}{prompt}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CannedCompletion {
    pub model: String,
    pub content: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    #[serde(default)]
    pub completions: BTreeMap<String, CannedCompletion>,
    #[serde(default)]
    pub embeddings: BTreeMap<String, Vec<f32>>,
}

impl Fixture {
    pub fn add_completion(&mut self, model: &str, prompt: &str, content: &str) {
        self.completions.insert(
            request_digest(model, prompt),
            CannedCompletion {
                model: model.to_string(),
                content: content.to_string(),
            },
        );
    }

    pub fn add_embedding(&mut self, text: &str, vector: Vec<f32>) {
        self.embeddings.insert(text.to_string(), vector);
    }

    pub fn from_json(raw: &str) -> Result<Self, StubError> {
        let f: Fixture = serde_json::from_str(raw).map_err(|e| StubError::Fixture(e.to_string()))?;
        let mut dims = f.embeddings.values().map(Vec::len);
        if let Some(first) = dims.next() {
            if dims.any(|d| d != first) {
                return Err(StubError::Fixture("embeddings differ in dimension".into()));
            }
        }
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self, StubError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("fixture serializes")
    }
}

struct AppState {
    fixture: Fixture,
    requests: AtomicUsize,
}

fn not_found(digest: &str) -> Response {
    (
        StatusCode::NOT_FOUND,
        Json(json!({ "error": "unknown request", "digest": digest })),
    )
        .into_response()
}

fn bad_request(msg: &str) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": msg }))).into_response()
}

async fn chat(State(state): State<Arc<AppState>>, Json(body): Json<Value>) -> Response {
    state.requests.fetch_add(1, Ordering::Relaxed);
    let Some(model) = body.get("model").and_then(Value::as_str) else {
        return bad_request("missing model");
    };
    let prompt = body
        .get("messages")
        .and_then(Value::as_array)
        .and_then(|m| {
            m.iter()
                .rev()
                .find(|msg| msg.get("role").and_then(Value::as_str) == Some("user"))
        })
        .and_then(|msg| msg.get("content"))
        .and_then(Value::as_str);
    let Some(prompt) = prompt else {
        return bad_request("missing user message");
    };
    let digest = request_digest(model, prompt);
    match state.fixture.completions.get(&digest) {
        Some(canned) => Json(json!({
            "id": format!("stub-{}", &digest[..16]),
            "object": "chat.completion",
            "model": model,
            "choices": [{
                "index": 0,
                "message": { "role": "assistant", "content": canned.content },
                "finish_reason": "stop",
            }],
        }))
        .into_response(),
        None => not_found(&digest),
    }
}

async fn embeddings(State(state): State<Arc<AppState>>, Json(body): Json<Value>) -> Response {
    state.requests.fetch_add(1, Ordering::Relaxed);
    let inputs: Vec<&str> = match body.get("input") {
        Some(Value::String(s)) => vec![s.as_str()],
        Some(Value::Array(items)) => match items.iter().map(Value::as_str).collect::<Option<Vec<_>>>() {
            Some(v) => v,
            None => return bad_request("input must be strings"),
        },
        _ => return bad_request("missing input"),
    };
    let mut data = Vec::with_capacity(inputs.len());
    for (index, text) in inputs.iter().enumerate() {
        match state.fixture.embeddings.get(*text) {
            Some(v) => data.push(json!({ "object": "embedding", "index": index, "embedding": v })),
            None => return not_found(&sha256_hex(text)),
        }
    }
    Json(json!({ "object": "list", "data": data })).into_response()
}

/// A running stub server.
pub struct StubServer {
    addr: SocketAddr,
    state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<()>,
}

impl StubServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn chat_url(&self) -> String {
        format!("{}{CHAT_PATH}", self.base_url())
    }

    pub fn embeddings_url(&self) -> String {
        format!("{}{EMBEDDINGS_PATH}", self.base_url())
    }

    /// Requests received so far on either route.
    pub fn requests(&self) -> usize {
        self.state.requests.load(Ordering::Relaxed)
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }
}

/// Serve `fixture` on 127.0.0.1:`port` (0 picks a free port).
pub async fn serve(fixture: Fixture, port: u16) -> Result<StubServer, StubError> {
    serve_on(fixture, SocketAddr::from(([127, 0, 0, 1], port))).await
}

pub async fn serve_on(fixture: Fixture, addr: SocketAddr) -> Result<StubServer, StubError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            StubError::PortInUse(addr.port())
        } else {
            StubError::Io(e)
        }
    })?;
    let addr = listener.local_addr()?;
    let state = Arc::new(AppState {
        fixture,
        requests: AtomicUsize::new(0),
    });
    let app = Router::new()
        .route(CHAT_PATH, post(chat))
        .route(EMBEDDINGS_PATH, post(embeddings))
        .with_state(state.clone());
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    Ok(StubServer {
        addr,
        state,
        shutdown: Some(tx),
        task,
    })
}

/// A stub server on its own runtime thread, for synchronous callers.
pub struct BackgroundStub {
    runtime: Option<tokio::runtime::Runtime>,
    server: Option<StubServer>,
}

impl BackgroundStub {
    pub fn start(fixture: Fixture, port: u16) -> Result<Self, StubError> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let server = runtime.block_on(serve(fixture, port))?;
        Ok(Self {
            runtime: Some(runtime),
            server: Some(server),
        })
    }

    pub fn server(&self) -> &StubServer {
        self.server.as_ref().expect("server running")
    }
}

impl Drop for BackgroundStub {
    fn drop(&mut self) {
        if let (Some(rt), Some(server)) = (self.runtime.take(), self.server.take()) {
            rt.block_on(server.shutdown());
            rt.shutdown_background();
        }
    }
}
