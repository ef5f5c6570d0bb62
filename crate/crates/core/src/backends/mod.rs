//! Client layer for the four model roles.
//!
//! Every role speaks JSON over a [`Transport`]. [`Client`] adds the response
//! cache, retry with exponential backoff and a per-role in-flight limit on
//! top of any transport, so HTTP servers and in-process mocks share one code
//! path. The role wrappers ([`LlmClient`], [`GeneratorClient`],
//! [`VqaClient`], [`CaptionerClient`]) own the wire formats.

mod cache;
mod config;
mod http;
pub mod mock;
mod wire;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use cache::{CacheKey, ResponseCache};
pub use config::{BackendConfig, BackendKind, BackendsConfig, MockOptions, VqaMockMode};
pub use http::HttpTransport;
pub use wire::{
    image_mime, map_vqa_reply, vqa_prompt, ChatMessage, GeneratedImage, MessageContent,
    CAPTION_PROMPT, UNKNOWN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Llm,
    Generator,
    Vqa,
    Captioner,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Llm => "llm",
            Role::Generator => "generator",
            Role::Vqa => "vqa",
            Role::Captioner => "captioner",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    /// Timeouts, connection failures, 429 and 5xx. Retried.
    Transient,
    /// 401 / 403 or a missing credential.
    Auth,
    /// Any other rejection.
    Permanent,
    /// The response did not have the expected shape.
    Decode,
}

#[derive(Debug, Clone, Error)]
#[error("{role} backend ({model}): {message}")]
pub struct BackendError {
    pub role: Role,
    pub model: String,
    pub kind: FailureKind,
    pub message: String,
}

/// Failure reported by a transport, before role/model context is attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError {
    pub kind: FailureKind,
    pub message: String,
}

impl TransportError {
    pub fn transient(message: impl Into<String>) -> Self {
        TransportError {
            kind: FailureKind::Transient,
            message: message.into(),
        }
    }

    pub fn permanent(message: impl Into<String>) -> Self {
        TransportError {
            kind: FailureKind::Permanent,
            message: message.into(),
        }
    }

    pub fn decode(message: impl Into<String>) -> Self {
        TransportError {
            kind: FailureKind::Decode,
            message: message.into(),
        }
    }
}

/// Sends one JSON request and returns the JSON response.
pub trait Transport: Send + Sync {
    fn send(&self, request: &Value) -> Result<Value, TransportError>;
}

impl<F> Transport for F
where
    F: Fn(&Value) -> Result<Value, TransportError> + Send + Sync,
{
    fn send(&self, request: &Value) -> Result<Value, TransportError> {
        self(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles on each further attempt.
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        // attempt is 1-based; no delay before the first one.
        if attempt <= 1 {
            return Duration::ZERO;
        }
        self.backoff_base
            .saturating_mul(1u32 << (attempt - 2).min(16))
    }
}

/// Counting semaphore bounding in-flight requests per role.
#[derive(Debug)]
struct Semaphore {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Semaphore {
            available: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

/// Cached, retrying, concurrency-limited client for one backend role.
pub struct Client {
    role: Role,
    model: String,
    transport: Arc<dyn Transport>,
    cache: Arc<ResponseCache>,
    retry: RetryPolicy,
    permits: Semaphore,
    network_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl fmt::Debug for Client {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Client")
            .field("role", &self.role)
            .field("model", &self.model)
            .field("retry", &self.retry)
            .finish_non_exhaustive()
    }
}

impl Client {
    pub fn new(role: Role, model: impl Into<String>, transport: Arc<dyn Transport>) -> Self {
        Client {
            role,
            model: model.into(),
            transport,
            cache: Arc::new(ResponseCache::in_memory()),
            retry: RetryPolicy::default(),
            permits: Semaphore::new(8),
            network_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: Arc<ResponseCache>) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        assert!(retry.max_attempts >= 1, "max_attempts must be at least 1");
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, permits: usize) -> Self {
        self.permits = Semaphore::new(permits);
        self
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    /// Requests that reached the transport, including failed attempts.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::Relaxed)
    }

    pub fn key(&self, request: &Value) -> CacheKey {
        CacheKey::new(self.role, &self.model, request)
    }

    pub fn is_cached(&self, request: &Value) -> bool {
        self.cache.contains(&self.key(request))
    }

    pub fn call(&self, request: &Value) -> Result<Value, BackendError> {
        let key = self.key(request);
        if let Some(hit) = self.cache.get(&key) {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        let _permit = self.permits.acquire();
        let mut attempt = 1;
        loop {
            std::thread::sleep(self.retry.delay_before(attempt));
            self.network_calls.fetch_add(1, Ordering::Relaxed);
            match self.transport.send(request) {
                Ok(response) => {
                    self.cache.put(&key, request, &response);
                    return Ok(response);
                }
                Err(e) if e.kind == FailureKind::Transient && attempt < self.retry.max_attempts => {
                    log::debug!(
                        "{} attempt {attempt}/{} failed: {}",
                        self.role,
                        self.retry.max_attempts,
                        e.message
                    );
                    attempt += 1;
                }
                Err(e) => {
                    return Err(BackendError {
                        role: self.role,
                        model: self.model.clone(),
                        kind: e.kind,
                        message: format!("{} (after {attempt} attempt(s))", e.message),
                    })
                }
            }
        }
    }

    fn decode_error(&self, message: String) -> BackendError {
        BackendError {
            role: self.role,
            model: self.model.clone(),
            kind: FailureKind::Decode,
            message,
        }
    }
}

/// Sampling parameters forwarded with chat requests.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub struct LlmClient {
    client: Client,
    sampling: Sampling,
}

impl LlmClient {
    pub fn new(client: Client, sampling: Sampling) -> Self {
        LlmClient { client, sampling }
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn request(&self, messages: &[ChatMessage]) -> Value {
        wire::chat_request(self.client.model(), messages, self.sampling)
    }

    pub fn chat(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let response = self.client.call(&self.request(messages))?;
        wire::chat_reply_text(&response).map_err(|m| self.client.decode_error(m))
    }
}

#[derive(Debug)]
pub struct GeneratorClient {
    client: Client,
}

impl GeneratorClient {
    pub fn new(client: Client) -> Self {
        GeneratorClient { client }
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn request(&self, prompt: &str, seed: u64) -> Value {
        wire::generation_request(self.client.model(), prompt, seed)
    }

    /// Image bytes for `prompt` under noise seed `seed`.
    pub fn generate(&self, prompt: &str, seed: u64) -> Result<Vec<u8>, BackendError> {
        let response = self.client.call(&self.request(prompt, seed))?;
        wire::generation_image(&response).map_err(|m| self.client.decode_error(m))
    }
}

#[derive(Debug)]
pub struct VqaClient {
    client: Client,
    sampling: Sampling,
}

impl VqaClient {
    pub fn new(client: Client, sampling: Sampling) -> Self {
        VqaClient { client, sampling }
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    /// `options` are the class labels; the unknown option is appended here.
    pub fn request(&self, image: &[u8], question: &str, options: &[String]) -> Value {
        let messages = [ChatMessage::user_with_image(
            &vqa_prompt(question, options),
            image,
        )];
        wire::chat_request(self.client.model(), &messages, self.sampling)
    }

    /// Raw VQA reply text.
    pub fn ask(
        &self,
        image: &[u8],
        question: &str,
        options: &[String],
    ) -> Result<String, BackendError> {
        let response = self.client.call(&self.request(image, question, options))?;
        wire::chat_reply_text(&response).map_err(|m| self.client.decode_error(m))
    }

    /// The chosen option: one of `options`, or [`UNKNOWN`].
    pub fn answer(
        &self,
        image: &[u8],
        question: &str,
        options: &[String],
    ) -> Result<String, BackendError> {
        let reply = self.ask(image, question, options)?;
        Ok(map_vqa_reply(&reply, options))
    }
}

#[derive(Debug)]
pub struct CaptionerClient {
    client: Client,
    sampling: Sampling,
}

impl CaptionerClient {
    pub fn new(client: Client, sampling: Sampling) -> Self {
        CaptionerClient { client, sampling }
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn request(&self, image: &[u8]) -> Value {
        let messages = [ChatMessage::user_with_image(CAPTION_PROMPT, image)];
        wire::chat_request(self.client.model(), &messages, self.sampling)
    }

    pub fn caption(&self, image: &[u8]) -> Result<String, BackendError> {
        let response = self.client.call(&self.request(image))?;
        let text = wire::chat_reply_text(&response).map_err(|m| self.client.decode_error(m))?;
        let text = text.trim();
        if text.is_empty() {
            return Err(self
                .client
                .decode_error("captioner returned empty text".into()));
        }
        Ok(text.to_string())
    }
}
