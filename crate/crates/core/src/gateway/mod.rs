//! Uniform client for chat-completion and embedding backends.
//!
//! A [`Gateway`] wraps a [`Transport`] (real HTTP or scripted mock) and adds
//! retries with exponential backoff, a concurrency cap, and a content-keyed
//! response cache on disk.

mod mock;

#[cfg(feature = "http")]
mod http;

pub use mock::{MockCall, MockRule, MockTransport};

#[cfg(feature = "http")]
pub use http::HttpTransport;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::jsonl::atomic_write;

/// One chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    /// Sampling cutoff sent to the backend as `top_k`.
    pub top_k: u32,
    pub model_tag: String,
    /// Distinguishes otherwise-identical requests in the cache (used to
    /// force regeneration attempts past a warm cache). Not sent on the wire.
    #[serde(default)]
    pub cache_salt: u64,
}

impl ChatRequest {
    fn validate(&self) -> Result<(), GatewayError> {
        if self.max_tokens < 1 {
            return Err(GatewayError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Why the backend stopped generating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

/// A chat-completion result. `text` carries the failure message when
/// `finish_reason` is `Error`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
    pub from_cache: bool,
}

impl ChatResponse {
    pub fn is_error(&self) -> bool {
        self.finish_reason == FinishReason::Error
    }
}

/// Connection and resilience settings for one backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint_url: String,
    /// Name of the environment variable holding the bearer token; empty
    /// means unauthenticated.
    #[serde(default)]
    pub auth_token_env_var: String,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_max_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Largest embedding batch forwarded to the backend in one call.
    #[serde(default = "default_embed_chunk_size")]
    pub embed_chunk_size: usize,
    /// Per-request timeout for the HTTP transport.
    #[serde(default = "default_request_timeout_ms")]
    pub request_timeout_ms: u64,
}

fn default_max_retries() -> u32 {
    3
}
fn default_backoff_base_ms() -> u64 {
    500
}
fn default_max_concurrency() -> usize {
    4
}
fn default_embed_chunk_size() -> usize {
    1000
}
fn default_request_timeout_ms() -> u64 {
    120_000
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint_url: String::new(),
            auth_token_env_var: String::new(),
            max_retries: default_max_retries(),
            backoff_base_ms: default_backoff_base_ms(),
            max_concurrency: default_max_concurrency(),
            cache_dir: None,
            embed_chunk_size: default_embed_chunk_size(),
            request_timeout_ms: default_request_timeout_ms(),
        }
    }
}

/// A fixed-dimension embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub dim: usize,
    pub model_tag: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>, model_tag: impl Into<String>) -> Self {
        let dim = values.len();
        EmbeddingVector {
            values,
            dim,
            model_tag: model_tag.into(),
        }
    }
}

/// Failure surfaced by a transport; classifies retryability.
#[derive(Debug, Clone, Error)]
pub enum TransportError {
    #[error("HTTP {status}: {message}")]
    Http { status: u16, message: String },
    #[error("network: {0}")]
    Network(String),
    #[error("auth: {0}")]
    Auth(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        match self {
            TransportError::Http { status, .. } => *status == 429 || *status >= 500,
            TransportError::Network(_) => true,
            TransportError::Auth(_) | TransportError::Protocol(_) => false,
        }
    }
}

/// Errors the gateway itself raises. Retryable backend failures are not
/// here: after retry exhaustion they come back as a `ChatResponse` with
/// `finish_reason = Error`.
#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("cache I/O under {path}: {source}")]
    Cache {
        path: String,
        source: std::io::Error,
    },
    #[error("embedding backend failed after {attempts} attempts: {message}")]
    EmbedFailed { attempts: u32, message: String },
    #[error("embedding dim mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// Backend-neutral request executor. Implementations must be shareable
/// across threads; the gateway enforces the concurrency cap above them.
pub trait Transport: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<ChatReply, TransportError>;
    fn embed(&self, model_tag: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, TransportError>;
}

/// Raw successful chat result from a transport.
#[derive(Debug, Clone)]
pub struct ChatReply {
    pub text: String,
    pub finish_reason: FinishReason,
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.cv.wait(permits).unwrap();
        }
        *permits -= 1;
        SemaphoreGuard { sem: self }
    }
}

struct SemaphoreGuard<'a> {
    sem: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.sem.permits.lock().unwrap() += 1;
        self.sem.cv.notify_one();
    }
}

#[derive(Serialize)]
struct ChatCacheKey<'a> {
    kind: &'static str,
    model_tag: &'a str,
    system_prompt: &'a str,
    user_prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    top_k: u32,
    cache_salt: u64,
}

#[derive(Serialize)]
struct EmbedCacheKey<'a> {
    kind: &'static str,
    model_tag: &'a str,
    text: &'a str,
}

#[derive(Serialize, Deserialize)]
struct ChatCacheEntry {
    text: String,
    finish_reason: FinishReason,
}

/// Shared client handle over one backend.
pub struct Gateway {
    cfg: BackendConfig,
    transport: Arc<dyn Transport>,
    semaphore: Semaphore,
    jitter: Mutex<rand_pcg::Pcg64>,
}

impl Gateway {
    pub fn new(cfg: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        if cfg.max_concurrency < 1 {
            return Err(GatewayError::InvalidConfig(
                "max_concurrency must be >= 1".into(),
            ));
        }
        if cfg.embed_chunk_size < 1 {
            return Err(GatewayError::InvalidConfig(
                "embed_chunk_size must be >= 1".into(),
            ));
        }
        let permits = cfg.max_concurrency;
        Ok(Gateway {
            cfg,
            transport,
            semaphore: Semaphore::new(permits),
            jitter: Mutex::new(crate::rng::substream(0x6261636b, "backoff")),
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    /// Executes one chat completion with caching and retries.
    ///
    /// Retryable failures (HTTP 429/5xx, network) are retried up to
    /// `max_retries` times with exponential backoff; exhaustion or a
    /// non-retryable backend failure yields `finish_reason = Error` with the
    /// message in `text`. Authentication failures are returned as `Err`.
    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let started = Instant::now();

        let cache_path = self.chat_cache_path(req)?;
        if let Some(path) = &cache_path {
            if let Some(entry) = self.read_cache::<ChatCacheEntry>(path)? {
                return Ok(ChatResponse {
                    text: entry.text,
                    finish_reason: entry.finish_reason,
                    latency_ms: elapsed_ms(started),
                    from_cache: true,
                });
            }
        }

        let mut attempt: u32 = 0;
        loop {
            let outcome = {
                let _permit = self.semaphore.acquire();
                self.transport.chat(req)
            };
            match outcome {
                Ok(reply) => {
                    if let Some(path) = &cache_path {
                        self.write_cache(
                            path,
                            &ChatCacheEntry {
                                text: reply.text.clone(),
                                finish_reason: reply.finish_reason,
                            },
                        )?;
                    }
                    return Ok(ChatResponse {
                        text: reply.text,
                        finish_reason: reply.finish_reason,
                        latency_ms: elapsed_ms(started),
                        from_cache: false,
                    });
                }
                Err(TransportError::Auth(message)) => return Err(GatewayError::Auth(message)),
                Err(err) if err.is_retryable() && attempt < self.cfg.max_retries => {
                    attempt += 1;
                    self.backoff(attempt);
                }
                Err(err) => {
                    return Ok(ChatResponse {
                        text: format!("backend failure after {} attempts: {err}", attempt + 1),
                        finish_reason: FinishReason::Error,
                        latency_ms: elapsed_ms(started),
                        from_cache: false,
                    });
                }
            }
        }
    }

    /// Embeds `texts`, preserving order, de-duplicating repeated texts, and
    /// forwarding cache misses in chunks of at most `embed_chunk_size`.
    pub fn embed_batch(
        &self,
        model_tag: &str,
        texts: &[String],
    ) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidRequest("no texts to embed".into()));
        }
        if let Some(empty) = texts.iter().position(|t| t.is_empty()) {
            return Err(GatewayError::InvalidRequest(format!(
                "empty text at index {empty}"
            )));
        }

        // Resolve each distinct text once: cache hit or pending backend call.
        let mut resolved: std::collections::HashMap<&str, Vec<f32>> =
            std::collections::HashMap::new();
        let mut pending: Vec<&str> = Vec::new();
        for text in texts {
            let text = text.as_str();
            if resolved.contains_key(text) || pending.contains(&text) {
                continue;
            }
            let path = self.embed_cache_path(model_tag, text)?;
            let cached = match &path {
                Some(p) => self.read_cache::<Vec<f32>>(p)?,
                None => None,
            };
            match cached {
                Some(values) => {
                    resolved.insert(text, values);
                }
                None => pending.push(text),
            }
        }

        for chunk in pending.chunks(self.cfg.embed_chunk_size) {
            let owned: Vec<String> = chunk.iter().map(|t| t.to_string()).collect();
            let vectors = self.embed_with_retries(model_tag, &owned)?;
            if vectors.len() != chunk.len() {
                return Err(GatewayError::EmbedFailed {
                    attempts: 1,
                    message: format!(
                        "backend returned {} vectors for {} texts",
                        vectors.len(),
                        chunk.len()
                    ),
                });
            }
            for (text, values) in chunk.iter().zip(vectors) {
                if let Some(path) = self.embed_cache_path(model_tag, text)? {
                    self.write_cache(&path, &values)?;
                }
                resolved.insert(text, values);
            }
        }

        let dim = resolved[texts[0].as_str()].len();
        let mut out = Vec::with_capacity(texts.len());
        for text in texts {
            let values = resolved[text.as_str()].clone();
            if values.len() != dim {
                return Err(GatewayError::DimMismatch {
                    expected: dim,
                    got: values.len(),
                });
            }
            out.push(EmbeddingVector::new(values, model_tag));
        }
        Ok(out)
    }

    fn embed_with_retries(
        &self,
        model_tag: &str,
        texts: &[String],
    ) -> Result<Vec<Vec<f32>>, GatewayError> {
        let mut attempt: u32 = 0;
        loop {
            let outcome = {
                let _permit = self.semaphore.acquire();
                self.transport.embed(model_tag, texts)
            };
            match outcome {
                Ok(vectors) => return Ok(vectors),
                Err(TransportError::Auth(message)) => return Err(GatewayError::Auth(message)),
                Err(err) if err.is_retryable() && attempt < self.cfg.max_retries => {
                    attempt += 1;
                    self.backoff(attempt);
                }
                Err(err) => {
                    return Err(GatewayError::EmbedFailed {
                        attempts: attempt + 1,
                        message: err.to_string(),
                    })
                }
            }
        }
    }

    fn backoff(&self, attempt: u32) {
        let base = self.cfg.backoff_base_ms;
        if base == 0 {
            return;
        }
        let exp = base.saturating_mul(1u64 << attempt.min(16)).min(30_000);
        let jitter = self.jitter.lock().unwrap().random_range(0..=base / 2);
        std::thread::sleep(Duration::from_millis(exp + jitter));
    }

    fn chat_cache_path(&self, req: &ChatRequest) -> Result<Option<PathBuf>, GatewayError> {
        let Some(dir) = &self.cfg.cache_dir else {
            return Ok(None);
        };
        let key = ChatCacheKey {
            kind: "chat",
            model_tag: &req.model_tag,
            system_prompt: &req.system_prompt,
            user_prompt: &req.user_prompt,
            max_tokens: req.max_tokens,
            temperature: req.temperature,
            top_k: req.top_k,
            cache_salt: req.cache_salt,
        };
        Ok(Some(dir.join(format!("{}.json", digest(&key)))))
    }

    fn embed_cache_path(
        &self,
        model_tag: &str,
        text: &str,
    ) -> Result<Option<PathBuf>, GatewayError> {
        let Some(dir) = &self.cfg.cache_dir else {
            return Ok(None);
        };
        let key = EmbedCacheKey {
            kind: "embed",
            model_tag,
            text,
        };
        Ok(Some(dir.join(format!("{}.json", digest(&key)))))
    }

    fn read_cache<T: serde::de::DeserializeOwned>(
        &self,
        path: &PathBuf,
    ) -> Result<Option<T>, GatewayError> {
        match std::fs::read(path) {
            Ok(bytes) => {
                let value = serde_json::from_slice(&bytes).map_err(|e| GatewayError::Cache {
                    path: path.display().to_string(),
                    source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
                })?;
                Ok(Some(value))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(GatewayError::Cache {
                path: path.display().to_string(),
                source,
            }),
        }
    }

    fn write_cache<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), GatewayError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| GatewayError::Cache {
                path: parent.display().to_string(),
                source,
            })?;
        }
        let bytes = serde_json::to_vec(value).expect("cache entry serializes");
        atomic_write(path, &bytes).map_err(|source| GatewayError::Cache {
            path: path.display().to_string(),
            source,
        })
    }
}

fn digest<T: Serialize>(key: &T) -> String {
    let payload = serde_json::to_vec(key).expect("cache key serializes");
    let mut hasher = Sha256::new();
    hasher.update(&payload);
    hex::encode(hasher.finalize())
}

fn elapsed_ms(started: Instant) -> u64 {
    u64::try_from(started.elapsed().as_millis()).unwrap_or(u64::MAX)
}
