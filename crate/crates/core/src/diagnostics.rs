use std::sync::Mutex;

use serde::{Deserialize, Serialize};

/// A per-item failure that did not abort its stage.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Diagnostic {
    pub stage: String,
    /// What failed, e.g. a caption id or `bias/caption/seed`.
    pub subject: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(stage: &str, subject: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            stage: stage.to_string(),
            subject: subject.into(),
            message: message.into(),
        }
    }
}

/// Append-only diagnostics collector shared between worker threads.
#[derive(Debug, Default)]
pub struct DiagnosticSink {
    items: Mutex<Vec<Diagnostic>>,
}

impl DiagnosticSink {
    pub fn new() -> Self {
        DiagnosticSink::default()
    }

    pub fn push(&self, diagnostic: Diagnostic) {
        log::warn!(
            "[{}] {}: {}",
            diagnostic.stage,
            diagnostic.subject,
            diagnostic.message
        );
        self.items.lock().unwrap().push(diagnostic);
    }

    pub fn len(&self) -> usize {
        self.items.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drains the sink in canonical (sorted) order.
    pub fn into_sorted(self) -> Vec<Diagnostic> {
        let mut items = self.items.into_inner().unwrap();
        items.sort();
        items
    }
}
