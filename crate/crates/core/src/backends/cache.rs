//! Content-addressed response cache.
//!
//! Layout: `<root>/<role>/<digest>` holds the response JSON and
//! `<root>/<role>/<digest>.meta.json` the request metadata. An in-memory
//! layer sits in front so repeated requests inside one process never touch
//! the disk twice.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::Role;

/// Strings longer than this are replaced by a digest in the metadata sidecar.
const META_INLINE_LIMIT: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub role: Role,
    pub model: String,
    /// Hex SHA-256 of the canonical request document.
    pub digest: String,
}

impl CacheKey {
    /// Digest of `{role, model, request}` serialized with sorted object keys.
    pub fn new(role: Role, model: &str, request: &Value) -> Self {
        let canonical = serde_json::json!({
            "role": role.as_str(),
            "model": model,
            "request": request,
        });
        // serde_json's default map is ordered, so this text is canonical.
        let text = serde_json::to_string(&canonical).expect("json value serializes");
        CacheKey {
            role,
            model: model.to_string(),
            digest: hex::encode(Sha256::digest(text.as_bytes())),
        }
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    role: &'a str,
    model: &'a str,
    digest: &'a str,
    request: Value,
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    root: Option<PathBuf>,
    memory: Mutex<HashMap<CacheKey, Value>>,
}

impl ResponseCache {
    /// Memory-only cache.
    pub fn in_memory() -> Self {
        ResponseCache::default()
    }

    pub fn on_disk(root: impl Into<PathBuf>) -> Self {
        ResponseCache {
            root: Some(root.into()),
            memory: Mutex::default(),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn payload_path(&self, key: &CacheKey) -> Option<PathBuf> {
        self.root
            .as_ref()
            .map(|r| r.join(key.role.as_str()).join(&key.digest))
    }

    pub fn get(&self, key: &CacheKey) -> Option<Value> {
        if let Some(v) = self.memory.lock().unwrap().get(key) {
            return Some(v.clone());
        }
        let path = self.payload_path(key)?;
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<Value>(&bytes) {
            Ok(v) => {
                self.memory.lock().unwrap().insert(key.clone(), v.clone());
                Some(v)
            }
            Err(e) => {
                log::warn!("ignoring corrupt cache entry {}: {e}", path.display());
                None
            }
        }
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.memory.lock().unwrap().contains_key(key)
            || self.payload_path(key).is_some_and(|p| p.is_file())
    }

    pub fn put(&self, key: &CacheKey, request: &Value, response: &Value) {
        self.memory
            .lock()
            .unwrap()
            .insert(key.clone(), response.clone());
        let Some(path) = self.payload_path(key) else {
            return;
        };
        let meta = Meta {
            role: key.role.as_str(),
            model: &key.model,
            digest: &key.digest,
            request: abbreviate(request),
        };
        let payload = serde_json::to_vec(response).expect("json value serializes");
        let meta_path = path.with_file_name(format!("{}.meta.json", key.digest));
        let meta_bytes = serde_json::to_vec_pretty(&meta).expect("json value serializes");
        // A failed cache write only costs a future network call.
        for (p, bytes) in [(&path, payload), (&meta_path, meta_bytes)] {
            if let Err(e) = crate::io::write_atomic(p, &bytes) {
                log::warn!("cache write failed: {e}");
            }
        }
    }
}

fn abbreviate(value: &Value) -> Value {
    match value {
        Value::String(s) if s.len() > META_INLINE_LIMIT => Value::String(format!(
            "<{} bytes, sha256:{}>",
            s.len(),
            hex::encode(Sha256::digest(s.as_bytes()))
        )),
        Value::Array(items) => Value::Array(items.iter().map(abbreviate).collect()),
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| (k.clone(), abbreviate(v)))
                .collect(),
        ),
        other => other.clone(),
    }
}
