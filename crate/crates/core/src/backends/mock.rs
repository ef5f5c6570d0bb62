//! Deterministic in-process backends.
//!
//! Each mock is a [`Transport`]: it decodes the same wire request a server
//! would receive and answers in the same wire shape, so pipelines running on
//! mocks exercise the real encoding, caching and retry paths.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::wire::{self, ChatMessage};
use super::{Transport, TransportError};
use crate::filtering::parse_stage1_prompt;
use crate::text::{contains_phrase, tokenize};

type ChatFn = dyn Fn(&[ChatMessage]) -> Result<String, TransportError> + Send + Sync;

/// Chat-completion mock driven by a responder over the message list.
#[derive(Clone)]
pub struct MockLlm {
    responder: Arc<ChatFn>,
}

impl MockLlm {
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&[ChatMessage]) -> Result<String, TransportError> + Send + Sync + 'static,
    {
        MockLlm {
            responder: Arc::new(f),
        }
    }

    /// Replies with `script[last user text]`, else `fallback`, else fails.
    pub fn scripted(script: HashMap<String, String>, fallback: Option<String>) -> Self {
        MockLlm::from_fn(move |messages| {
            let prompt = last_user_text(messages);
            script
                .get(&prompt)
                .or(fallback.as_ref())
                .cloned()
                .ok_or_else(|| {
                    TransportError::permanent(format!("no scripted reply for {prompt:?}"))
                })
        })
    }

    /// Keyword-rule LLM: proposes every rule whose keyword occurs in the
    /// caption and answers stage-1 filter queries by looking for the rule's
    /// classes in the caption.
    pub fn rules(rules: Vec<MockRule>) -> Self {
        MockLlm::from_fn(move |messages| {
            let prompt = last_user_text(messages);
            if let Some((caption, question)) = parse_stage1_prompt(&prompt) {
                let tokens = tokenize(&caption);
                let present = rules
                    .iter()
                    .filter(|r| r.question == question)
                    .any(|r| r.mentions_class(&tokens));
                return Ok(if present { "Yes." } else { "No." }.to_string());
            }
            let tokens = tokenize(&prompt);
            let entries: Vec<Value> = rules
                .iter()
                .filter(|r| {
                    r.keywords
                        .iter()
                        .any(|k| contains_phrase(&tokens, &tokenize(k)))
                })
                .map(|r| {
                    serde_json::json!({
                        "name": r.name,
                        "classes": r.classes,
                        "question": r.question,
                        "present_in_prompt": r.mentions_class(&tokens),
                    })
                })
                .collect();
            Ok(serde_json::to_string(&entries).expect("json serializes"))
        })
    }
}

impl Transport for MockLlm {
    fn send(&self, request: &Value) -> Result<Value, TransportError> {
        let messages = wire::request_messages(request).map_err(TransportError::permanent)?;
        let text = (self.responder)(&messages)?;
        Ok(wire::chat_response(&text))
    }
}

fn last_user_text(messages: &[ChatMessage]) -> String {
    messages
        .iter()
        .rev()
        .find(|m| m.role == "user")
        .map(ChatMessage::text)
        .unwrap_or_default()
}

/// One keyword rule of [`MockLlm::rules`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    pub keywords: Vec<String>,
    pub name: String,
    pub classes: Vec<String>,
    pub question: String,
}

impl MockRule {
    fn mentions_class(&self, tokens: &[String]) -> bool {
        self.classes
            .iter()
            .any(|c| contains_phrase(tokens, &tokenize(c)))
    }
}

/// Hex SHA-256 of a prompt, as embedded in mock images.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

const MOCK_IMAGE_SIDE: usize = 16;

/// Deterministic 16x16 greyscale PGM whose pixels are a SHA-256 stream of
/// `prompt ∥ seed`. A header comment records the prompt digest and seed.
pub fn mock_image(prompt: &str, seed: u64) -> Vec<u8> {
    let digest = prompt_digest(prompt);
    let mut bytes = format!(
        "P5\n# mockgen prompt={digest} seed={seed}\n{MOCK_IMAGE_SIDE} {MOCK_IMAGE_SIDE}\n255\n"
    )
    .into_bytes();
    let pixels = MOCK_IMAGE_SIDE * MOCK_IMAGE_SIDE;
    for block in 0..pixels.div_ceil(32) as u64 {
        let mut h = Sha256::new();
        h.update(prompt.as_bytes());
        h.update(seed.to_le_bytes());
        h.update(block.to_le_bytes());
        bytes.extend_from_slice(&h.finalize());
    }
    bytes
}

fn header_len(bytes: &[u8]) -> usize {
    // P5, comment, dimensions, maxval: four newline-terminated lines.
    let mut seen = 0;
    for (i, b) in bytes.iter().enumerate() {
        if *b == b'\n' {
            seen += 1;
            if seen == 4 {
                return i + 1;
            }
        }
    }
    bytes.len()
}

/// Recovers `(prompt digest, seed)` from an image made by [`mock_image`].
pub fn parse_mock_image(bytes: &[u8]) -> Option<(String, u64)> {
    let head = std::str::from_utf8(&bytes[..header_len(bytes).min(bytes.len())]).ok()?;
    let comment = head.lines().find(|l| l.starts_with("# mockgen "))?;
    let mut digest = None;
    let mut seed = None;
    for field in comment.trim_start_matches("# mockgen ").split(' ') {
        match field.split_once('=') {
            Some(("prompt", v)) => digest = Some(v.to_string()),
            Some(("seed", v)) => seed = v.parse().ok(),
            _ => {}
        }
    }
    Some((digest?, seed?))
}

type FailFn = dyn Fn(&str, u64) -> bool + Send + Sync;

/// Image generator mock producing [`mock_image`] bitmaps.
#[derive(Clone, Default)]
pub struct MockGenerator {
    fails: Option<Arc<FailFn>>,
}

impl MockGenerator {
    pub fn new() -> Self {
        MockGenerator::default()
    }

    /// Fails permanently whenever `predicate(prompt, seed)` holds.
    pub fn failing<F>(predicate: F) -> Self
    where
        F: Fn(&str, u64) -> bool + Send + Sync + 'static,
    {
        MockGenerator {
            fails: Some(Arc::new(predicate)),
        }
    }
}

impl Transport for MockGenerator {
    fn send(&self, request: &Value) -> Result<Value, TransportError> {
        let prompt = request
            .get("prompt")
            .and_then(Value::as_str)
            .ok_or_else(|| TransportError::permanent("generation request without prompt"))?;
        let seed = request
            .get("seed")
            .and_then(Value::as_u64)
            .ok_or_else(|| TransportError::permanent("generation request without seed"))?;
        if self.fails.as_ref().is_some_and(|f| f(prompt, seed)) {
            return Err(TransportError::permanent(format!(
                "mock generation failure for seed {seed}"
            )));
        }
        Ok(wire::generation_response(&mock_image(prompt, seed)))
    }
}

/// What a VQA mock sees of one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VqaQuery {
    pub image: Vec<u8>,
    pub question: String,
    /// Class options, without the unknown option.
    pub options: Vec<String>,
}

type VqaFn = dyn Fn(&VqaQuery) -> Result<String, TransportError> + Send + Sync;

#[derive(Clone)]
pub struct MockVqa {
    responder: Arc<VqaFn>,
}

/// Deterministic number in [0, 1) derived from `bytes` and a salt.
pub fn unit_interval(bytes: &[u8], salt: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(salt.to_le_bytes());
    h.update(bytes);
    let digest = h.finalize();
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
}

impl MockVqa {
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&VqaQuery) -> Result<String, TransportError> + Send + Sync + 'static,
    {
        MockVqa {
            responder: Arc::new(f),
        }
    }

    pub fn constant(answer: impl Into<String>) -> Self {
        let answer = answer.into();
        MockVqa::from_fn(move |_| Ok(answer.clone()))
    }

    /// Picks a class from a hash of image and question. With probability
    /// `unknown_rate` it answers unknown; otherwise the class index is
    /// `floor(k * u^skew)`, so `skew > 1` favours the first listed class.
    pub fn hashed(skew: f64, unknown_rate: f64) -> Self {
        MockVqa::from_fn(move |q| {
            let mut material = q.image.clone();
            material.extend_from_slice(q.question.as_bytes());
            if unit_interval(&material, 0) < unknown_rate || q.options.is_empty() {
                return Ok(wire::UNKNOWN.to_string());
            }
            let u = unit_interval(&material, 1).powf(skew);
            let k = q.options.len();
            Ok(q.options[((k as f64 * u) as usize).min(k - 1)].clone())
        })
    }

    /// Answers from a table keyed by (prompt digest, seed) of images made by
    /// [`mock_image`]; anything else is unknown.
    pub fn planted(table: HashMap<(String, u64), String>) -> Self {
        MockVqa::from_fn(move |q| {
            Ok(parse_mock_image(&q.image)
                .and_then(|key| table.get(&key).cloned())
                .unwrap_or_else(|| wire::UNKNOWN.to_string()))
        })
    }
}

impl Transport for MockVqa {
    fn send(&self, request: &Value) -> Result<Value, TransportError> {
        let messages = wire::request_messages(request).map_err(TransportError::permanent)?;
        let user = messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .ok_or_else(|| TransportError::permanent("vqa request without user message"))?;
        let image = user
            .image()
            .ok_or_else(|| TransportError::permanent("vqa request without image"))?;
        let prompt = user.text();
        let (question, options) = wire::split_vqa_prompt(&prompt)
            .ok_or_else(|| TransportError::permanent("vqa prompt lists no options"))?;
        let reply = (self.responder)(&VqaQuery {
            image,
            question,
            options,
        })?;
        Ok(wire::chat_response(&reply))
    }
}

type CaptionFn = dyn Fn(&[u8]) -> Result<String, TransportError> + Send + Sync;

#[derive(Clone)]
pub struct MockCaptioner {
    responder: Arc<CaptionFn>,
}

impl MockCaptioner {
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&[u8]) -> Result<String, TransportError> + Send + Sync + 'static,
    {
        MockCaptioner {
            responder: Arc::new(f),
        }
    }

    pub fn constant(caption: impl Into<String>) -> Self {
        let caption = caption.into();
        MockCaptioner::from_fn(move |_| Ok(caption.clone()))
    }
}

impl Transport for MockCaptioner {
    fn send(&self, request: &Value) -> Result<Value, TransportError> {
        let messages = wire::request_messages(request).map_err(TransportError::permanent)?;
        let image = messages
            .iter()
            .find_map(ChatMessage::image)
            .ok_or_else(|| TransportError::permanent("caption request without image"))?;
        Ok(wire::chat_response(&(self.responder)(&image)?))
    }
}
