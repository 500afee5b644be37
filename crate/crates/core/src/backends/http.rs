//! JSON-over-HTTP adapters.
//!
//! The reasoner and judge speak chat-completions: one user message whose
//! content is the rendered text followed by each attached image as a
//! base64 data URL. The generator posts to `images/generations` and reads
//! `data[0].b64_json`.
//!
//! The credential is read from the environment on every call and sent as a
//! bearer token. It is never stored.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, GeneratedImage, ImageGenerator, ImageJudge, TextReasoner};
use crate::agents::ReasonerEnvelope;
use crate::types::{MediaKind, Prompt};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpEndpointConfig {
    pub base_url: String,
    pub auth_token_env_name: String,
    pub model_name: String,
    pub timeout_secs: u64,
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff_initial_ms: u64,
}

impl HttpEndpointConfig {
    pub fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }

    fn credential(&self) -> Result<String, BackendError> {
        match std::env::var(&self.auth_token_env_name) {
            Ok(v) if !v.trim().is_empty() => Ok(v),
            _ => Err(BackendError::AuthFailure(format!(
                "environment variable {} is not set",
                self.auth_token_env_name
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// One POST of a JSON body. Errors are transport-level failures.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, String>;
}

#[derive(Debug, Clone)]
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(max_connections_per_host: usize) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .pool_max_idle_per_host(max_connections_per_host)
            .build()
            .map_err(|e| BackendError::Unavailable {
                attempts: 0,
                detail: format!("cannot build HTTP client: {e}"),
            })?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, String> {
        let resp = self
            .client
            .post(url)
            .bearer_auth(bearer)
            .timeout(timeout)
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

/// Posts with retries. 401/403 fail at once; other 4xx are not retried.
fn post_with_retries(
    endpoint: &HttpEndpointConfig,
    transport: &dyn Transport,
    url: &str,
    body: &Value,
) -> Result<String, BackendError> {
    let token = endpoint.credential()?;
    let timeout = Duration::from_secs(endpoint.timeout_secs.max(1));
    let attempts = endpoint.max_retries + 1;
    let mut last = String::new();
    for attempt in 1..=attempts {
        if attempt > 1 {
            let factor = 1u64 << (attempt - 2).min(16);
            std::thread::sleep(Duration::from_millis(endpoint.backoff_initial_ms.saturating_mul(factor)));
        }
        match transport.post_json(url, &token, body, timeout) {
            Ok(r) if (200..300).contains(&r.status) => return Ok(r.body),
            Ok(r) if r.status == 401 || r.status == 403 => {
                return Err(BackendError::AuthFailure(format!("{url} answered {}", r.status)));
            }
            Ok(r) if r.status >= 500 || r.status == 429 => {
                last = format!("{url} answered {}", r.status);
            }
            Ok(r) => {
                return Err(BackendError::InvalidResponse(format!(
                    "{url} answered {}: {}",
                    r.status,
                    excerpt(&r.body)
                )));
            }
            Err(e) => last = format!("{url}: {e}"),
        }
        tracing::debug!(attempt, "{last}");
    }
    Err(BackendError::Unavailable {
        attempts,
        detail: last,
    })
}

fn excerpt(s: &str) -> String {
    s.chars().take(200).collect()
}

/// Chat-completions request body for an envelope.
pub fn chat_request(model: &str, envelope: &ReasonerEnvelope) -> Value {
    let mut content = vec![json!({ "type": "text", "text": envelope.rendered_text })];
    for img in &envelope.attached_images {
        content.push(json!({
            "type": "image_url",
            "image_url": { "url": format!("data:{};base64,{}", img.media_kind.mime(), B64.encode(&img.bytes)) }
        }));
    }
    json!({
        "model": model,
        "messages": [{ "role": "user", "content": content }],
    })
}

fn chat_reply(body: &str) -> Result<String, BackendError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::InvalidResponse(format!("response is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::InvalidResponse("missing choices[0].message.content".into()))
}

#[derive(Clone)]
pub struct HttpReasoner {
    endpoint: HttpEndpointConfig,
    transport: Arc<dyn Transport>,
}

impl HttpReasoner {
    pub fn new(endpoint: HttpEndpointConfig, transport: Arc<dyn Transport>) -> Self {
        Self {
            endpoint,
            transport,
        }
    }

    fn call(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError> {
        let body = chat_request(&self.endpoint.model_name, envelope);
        let url = self.endpoint.url("chat/completions");
        let raw = post_with_retries(&self.endpoint, self.transport.as_ref(), &url, &body)?;
        chat_reply(&raw)
    }
}

impl TextReasoner for HttpReasoner {
    fn complete(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError> {
        self.call(envelope)
    }
}

impl ImageJudge for HttpReasoner {
    fn judge(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError> {
        self.call(envelope)
    }
}

#[derive(Clone)]
pub struct HttpGenerator {
    endpoint: HttpEndpointConfig,
    transport: Arc<dyn Transport>,
    /// Passed through to the request body untouched.
    pub extra: BTreeMap<String, Value>,
}

impl HttpGenerator {
    pub fn new(endpoint: HttpEndpointConfig, transport: Arc<dyn Transport>) -> Self {
        Self {
            endpoint,
            transport,
            extra: BTreeMap::new(),
        }
    }
}

impl ImageGenerator for HttpGenerator {
    fn generate(&self, prompt: &Prompt, sub_seed: u64) -> Result<GeneratedImage, BackendError> {
        let mut body = json!({
            "model": self.endpoint.model_name,
            "prompt": prompt.text,
            "seed": sub_seed,
            "n": 1,
            "response_format": "b64_json",
        });
        if let Some(obj) = body.as_object_mut() {
            for (k, v) in &self.extra {
                obj.insert(k.clone(), v.clone());
            }
        }
        let url = self.endpoint.url("images/generations");
        let raw = post_with_retries(&self.endpoint, self.transport.as_ref(), &url, &body)?;
        let v: Value = serde_json::from_str(&raw)
            .map_err(|e| BackendError::GenerationFailure(format!("response is not JSON: {e}")))?;
        let b64 = v
            .pointer("/data/0/b64_json")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::GenerationFailure("missing data[0].b64_json".into()))?;
        let content = B64
            .decode(b64)
            .map_err(|e| BackendError::GenerationFailure(format!("bad base64 payload: {e}")))?;
        if content.is_empty() {
            return Err(BackendError::GenerationFailure("empty image payload".into()));
        }
        let mut metadata = BTreeMap::from([
            ("backend".to_string(), "http".to_string()),
            ("model".to_string(), self.endpoint.model_name.clone()),
            ("seed".to_string(), sub_seed.to_string()),
        ]);
        for (k, v) in &self.extra {
            metadata.insert(k.clone(), v.to_string());
        }
        Ok(GeneratedImage {
            content,
            media_kind: MediaKind::RasterImage,
            metadata,
        })
    }
}
