use std::time::Duration;

use serde_json::Value;

use super::{FailureKind, Transport, TransportError};

/// Largest response body accepted (generated images can be large).
const MAX_BODY_BYTES: u64 = 64 * 1024 * 1024;

/// JSON-over-HTTP POST transport with optional bearer authentication.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, token: Option<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        HttpTransport {
            agent: ureq::Agent::new_with_config(config),
            endpoint: endpoint.into(),
            token,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

pub(crate) fn classify_status(status: u16) -> FailureKind {
    match status {
        401 | 403 => FailureKind::Auth,
        408 | 429 | 500..=599 => FailureKind::Transient,
        _ => FailureKind::Permanent,
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &Value) -> Result<Value, TransportError> {
        let mut call = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = call
            .send_json(request)
            .map_err(|e| TransportError::transient(format!("POST {}: {e}", self.endpoint)))?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .with_config()
            .limit(MAX_BODY_BYTES)
            .read_to_vec()
            .map_err(|e| TransportError::transient(format!("reading response body: {e}")))?;
        if !(200..300).contains(&status) {
            let snippet: String = String::from_utf8_lossy(&body).chars().take(200).collect();
            return Err(TransportError {
                kind: classify_status(status),
                message: format!("HTTP {status} from {}: {snippet}", self.endpoint),
            });
        }
        serde_json::from_slice(&body)
            .map_err(|e| TransportError::decode(format!("response is not JSON: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_classes() {
        assert_eq!(classify_status(503), FailureKind::Transient);
        assert_eq!(classify_status(429), FailureKind::Transient);
        assert_eq!(classify_status(401), FailureKind::Auth);
        assert_eq!(classify_status(404), FailureKind::Permanent);
    }

    #[test]
    fn unreachable_endpoint_is_transient() {
        // Port 9 (discard) on localhost is closed in the test sandbox.
        let t = HttpTransport::new("http://127.0.0.1:9/v1", Duration::from_secs(2), None);
        let err = t.send(&serde_json::json!({})).unwrap_err();
        assert_eq!(err.kind, FailureKind::Transient);
    }
}
