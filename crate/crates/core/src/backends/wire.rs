//! Wire formats: chat-completion JSON for the LLM, VQA and captioner roles
//! (images travel as base64 data URLs) and a prompt+seed JSON body for image
//! generation.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::Sampling;
use crate::text::{contains_phrase, normalize_label, tokenize};

/// The extra VQA option flagging an image the model cannot classify.
pub const UNKNOWN: &str = "unknown";

/// Instruction sent with every image to the captioner.
pub const CAPTION_PROMPT: &str = "Describe this image in one sentence.";

const OPTIONS_MARKER: &str = " Answer with one of: ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: MessageContent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MessageContent {
    Text(String),
    Parts(Vec<ContentPart>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageUrl {
    pub url: String,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: MessageContent::Text(text.into()),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: MessageContent::Text(text.into()),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        ChatMessage {
            role: "assistant".into(),
            content: MessageContent::Text(text.into()),
        }
    }

    pub fn user_with_image(text: &str, image: &[u8]) -> Self {
        ChatMessage {
            role: "user".into(),
            content: MessageContent::Parts(vec![
                ContentPart::ImageUrl {
                    image_url: ImageUrl {
                        url: format!("data:{};base64,{}", image_mime(image), B64.encode(image)),
                    },
                },
                ContentPart::Text { text: text.into() },
            ]),
        }
    }

    /// Concatenated text parts.
    pub fn text(&self) -> String {
        match &self.content {
            MessageContent::Text(t) => t.clone(),
            MessageContent::Parts(parts) => parts
                .iter()
                .filter_map(|p| match p {
                    ContentPart::Text { text } => Some(text.as_str()),
                    ContentPart::ImageUrl { .. } => None,
                })
                .collect::<Vec<_>>()
                .join("\n"),
        }
    }

    pub fn image(&self) -> Option<Vec<u8>> {
        let MessageContent::Parts(parts) = &self.content else {
            return None;
        };
        parts.iter().find_map(|p| match p {
            ContentPart::ImageUrl { image_url } => decode_data_url(&image_url.url),
            ContentPart::Text { .. } => None,
        })
    }
}

/// A generated image and the inputs that identify it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedImage {
    pub bias_name: String,
    pub caption_id: String,
    pub seed: u64,
    pub model: String,
    pub bytes: Vec<u8>,
}

pub fn image_mime(bytes: &[u8]) -> &'static str {
    match bytes {
        [0x89, b'P', b'N', b'G', ..] => "image/png",
        [0xFF, 0xD8, 0xFF, ..] => "image/jpeg",
        [b'G', b'I', b'F', b'8', ..] => "image/gif",
        [b'R', b'I', b'F', b'F', _, _, _, _, b'W', b'E', b'B', b'P', ..] => "image/webp",
        [b'P', b'5', ..] => "image/x-portable-graymap",
        _ => "application/octet-stream",
    }
}

fn decode_data_url(url: &str) -> Option<Vec<u8>> {
    let (_, payload) = url.strip_prefix("data:")?.split_once(";base64,")?;
    B64.decode(payload).ok()
}

pub(crate) fn chat_request(model: &str, messages: &[ChatMessage], sampling: Sampling) -> Value {
    let mut body = json!({
        "model": model,
        "messages": messages,
        "temperature": sampling.temperature,
    });
    if let Some(seed) = sampling.seed {
        body["seed"] = json!(seed);
    }
    body
}

/// Messages of a chat request, as seen by a server or mock.
pub(crate) fn request_messages(request: &Value) -> Result<Vec<ChatMessage>, String> {
    let messages = request
        .get("messages")
        .ok_or("request has no messages")?
        .clone();
    serde_json::from_value(messages).map_err(|e| format!("malformed messages: {e}"))
}

/// Assistant text of a chat-completion response.
///
/// Accepts the `choices[0].message.content` shape and the bare
/// `message.content` shape some local servers return.
pub(crate) fn chat_reply_text(response: &Value) -> Result<String, String> {
    let message = response
        .pointer("/choices/0/message")
        .or_else(|| response.get("message"))
        .ok_or_else(|| "response has no message".to_string())?;
    match message.get("content") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Array(parts)) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        _ => Err("response message has no text content".into()),
    }
}

pub(crate) fn chat_response(text: &str) -> Value {
    json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]
    })
}

pub(crate) fn generation_request(model: &str, prompt: &str, seed: u64) -> Value {
    json!({"model": model, "prompt": prompt, "seed": seed})
}

/// Decodes the image of a generation response: `image`, `images[0]` or
/// `data[0].b64_json`, each base64 (optionally as a data URL).
pub(crate) fn generation_image(response: &Value) -> Result<Vec<u8>, String> {
    let encoded = response
        .get("image")
        .or_else(|| response.pointer("/images/0"))
        .or_else(|| response.pointer("/data/0/b64_json"))
        .and_then(Value::as_str)
        .ok_or("generation response has no image field")?;
    if encoded.starts_with("data:") {
        return decode_data_url(encoded).ok_or_else(|| "malformed image data URL".into());
    }
    B64.decode(encoded)
        .map_err(|e| format!("image is not valid base64: {e}"))
}

pub(crate) fn generation_response(image: &[u8]) -> Value {
    json!({"image": B64.encode(image)})
}

/// Question text sent to the VQA model, listing the allowed answers.
pub fn vqa_prompt(question: &str, options: &[String]) -> String {
    let mut listed: Vec<&str> = options.iter().map(String::as_str).collect();
    listed.push(UNKNOWN);
    format!("{question}{OPTIONS_MARKER}{}.", listed.join(", "))
}

/// Inverse of [`vqa_prompt`]: the question and the class options (without
/// the unknown option).
pub(crate) fn split_vqa_prompt(prompt: &str) -> Option<(String, Vec<String>)> {
    let (question, rest) = prompt.rsplit_once(OPTIONS_MARKER)?;
    let mut options: Vec<String> = rest
        .trim_end_matches('.')
        .split(", ")
        .map(str::to_string)
        .collect();
    if options.last().map(String::as_str) == Some(UNKNOWN) {
        options.pop();
    }
    Some((question.to_string(), options))
}

/// Maps a free-text VQA reply onto one of `options` or [`UNKNOWN`].
///
/// First a normalized exact match, then a whole-word phrase match that must
/// single out exactly one option. Anything else is unknown.
pub fn map_vqa_reply(reply: &str, options: &[String]) -> String {
    let trimmed = normalize_label(
        reply.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace()),
    );
    if trimmed == UNKNOWN {
        return UNKNOWN.to_string();
    }
    if let Some(hit) = options.iter().find(|o| normalize_label(o) == trimmed) {
        return hit.clone();
    }
    let reply_tokens = tokenize(reply);
    let mut hits = options
        .iter()
        .filter(|o| contains_phrase(&reply_tokens, &tokenize(o)));
    match (hits.next(), hits.next()) {
        (Some(only), None) => only.clone(),
        _ => UNKNOWN.to_string(),
    }
}
