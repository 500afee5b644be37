//! Record/replay of backend calls.
//!
//! Each call becomes `<dir>/<index>.json`:
//! `{envelope_digest, request, response, status}` with `status` either
//! `"ok"` or `"error"`. Replay serves entries strictly in index order.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    BackendError, GeneratedImage, GeneratorSlot, ImageGenerator, ImageJudge, JudgeSlot, ReasonerSlot,
    TextReasoner,
};
use crate::agents::ReasonerEnvelope;
use crate::digest::sha256_parts;
use crate::store::atomic_write;
use crate::types::{MediaKind, Prompt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub envelope_digest: String,
    pub request: Value,
    pub response: Value,
    pub status: String,
}

fn envelope_request(kind: &str, envelope: &ReasonerEnvelope) -> Value {
    json!({
        "kind": kind,
        "role": envelope.role,
        "rendered_text": envelope.rendered_text,
        "attached_images": envelope.attached_images.iter().map(|i| json!({
            "iteration": i.iteration,
            "digest": i.digest,
            "media_kind": i.media_kind,
        })).collect::<Vec<_>>(),
        "expected_schema": envelope.expected_schema,
    })
}

fn generate_digest(prompt: &Prompt, sub_seed: u64) -> String {
    hex::encode(sha256_parts([
        b"generate".as_slice(),
        prompt.text.as_bytes(),
        &prompt.iteration.to_le_bytes(),
        &sub_seed.to_le_bytes(),
    ]))
}

fn generate_request(prompt: &Prompt, sub_seed: u64) -> Value {
    json!({
        "kind": "generate",
        "prompt": prompt.text,
        "iteration": prompt.iteration,
        "sub_seed": sub_seed,
    })
}

fn error_response(e: &BackendError) -> Value {
    json!({ "error": e })
}

fn recorded_error(response: &Value) -> BackendError {
    response
        .get("error")
        .and_then(|e| serde_json::from_value(e.clone()).ok())
        .unwrap_or_else(|| BackendError::InvalidResponse("unreadable recorded error".into()))
}

/// Writes cassettes for one run. Indices are shared by all backends.
#[derive(Debug)]
pub struct CassetteLog {
    dir: PathBuf,
    next: AtomicUsize,
}

impl CassetteLog {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            next: AtomicUsize::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn recorded(&self) -> usize {
        self.next.load(Ordering::SeqCst)
    }

    fn record(&self, entry: &CassetteEntry) -> Result<(), BackendError> {
        let index = self.next.fetch_add(1, Ordering::SeqCst);
        let path = self.dir.join(format!("{index}.json"));
        let bytes = serde_json::to_vec_pretty(entry).expect("cassette entry serializes");
        atomic_write(&path, &bytes).map_err(|e| BackendError::Unavailable {
            attempts: 0,
            detail: format!("cannot record cassette {}: {e}", path.display()),
        })
    }
}

pub(super) struct Recorder<S> {
    log: std::sync::Arc<CassetteLog>,
    inner: S,
}

impl<S> Recorder<S> {
    pub(super) fn new(log: std::sync::Arc<CassetteLog>, inner: S) -> Self {
        Self { log, inner }
    }

    fn text_call(
        &self,
        kind: &str,
        envelope: &ReasonerEnvelope,
        call: impl FnOnce() -> Result<String, BackendError>,
    ) -> Result<String, BackendError> {
        let result = call();
        let (response, status) = match &result {
            Ok(text) => (json!({ "text": text }), "ok"),
            Err(e) => (error_response(e), "error"),
        };
        self.log.record(&CassetteEntry {
            envelope_digest: envelope.digest(),
            request: envelope_request(kind, envelope),
            response,
            status: status.into(),
        })?;
        result
    }
}

impl TextReasoner for Recorder<ReasonerSlot> {
    fn complete(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError> {
        self.text_call("reasoner", envelope, || self.inner.0.complete(envelope))
    }
}

impl ImageJudge for Recorder<JudgeSlot> {
    fn judge(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError> {
        self.text_call("judge", envelope, || self.inner.0.judge(envelope))
    }
}

impl ImageGenerator for Recorder<GeneratorSlot> {
    fn generate(&self, prompt: &Prompt, sub_seed: u64) -> Result<GeneratedImage, BackendError> {
        let result = self.inner.0.generate(prompt, sub_seed);
        let (response, status) = match &result {
            Ok(img) => (
                json!({
                    "content_b64": B64.encode(&img.content),
                    "media_kind": img.media_kind,
                    "metadata": img.metadata,
                }),
                "ok",
            ),
            Err(e) => (error_response(e), "error"),
        };
        self.log.record(&CassetteEntry {
            envelope_digest: generate_digest(prompt, sub_seed),
            request: generate_request(prompt, sub_seed),
            response,
            status: status.into(),
        })?;
        result
    }
}

/// Serves recorded responses in order. Requests whose digest differs from
/// the recording are still answered and noted in [`CassetteReplay::mismatches`].
#[derive(Debug)]
pub struct CassetteReplay {
    dir: PathBuf,
    next: AtomicUsize,
    mismatches: Mutex<Vec<String>>,
}

impl CassetteReplay {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            next: AtomicUsize::new(0),
            mismatches: Mutex::new(Vec::new()),
        }
    }

    pub fn mismatches(&self) -> Vec<String> {
        self.mismatches.lock().expect("mismatch lock").clone()
    }

    pub fn served(&self) -> usize {
        self.next.load(Ordering::SeqCst)
    }

    fn next_entry(&self, digest: &str) -> Result<CassetteEntry, BackendError> {
        let index = self.next.fetch_add(1, Ordering::SeqCst);
        let path = self.dir.join(format!("{index}.json"));
        let bytes = std::fs::read(&path).map_err(|_| BackendError::MissingCassette {
            index,
            path: path.display().to_string(),
        })?;
        let entry: CassetteEntry = serde_json::from_slice(&bytes).map_err(|e| {
            BackendError::InvalidResponse(format!("cassette {}: {e}", path.display()))
        })?;
        if entry.envelope_digest != digest {
            let note = format!(
                "cassette {index}: request digest {digest} differs from recorded {}",
                entry.envelope_digest
            );
            tracing::warn!("{note}");
            self.mismatches.lock().expect("mismatch lock").push(note);
        }
        Ok(entry)
    }

    fn text(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError> {
        let entry = self.next_entry(&envelope.digest())?;
        if entry.status != "ok" {
            return Err(recorded_error(&entry.response));
        }
        entry
            .response
            .get("text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::InvalidResponse("cassette has no response text".into()))
    }
}

impl TextReasoner for CassetteReplay {
    fn complete(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError> {
        self.text(envelope)
    }
}

impl ImageJudge for CassetteReplay {
    fn judge(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError> {
        self.text(envelope)
    }
}

impl ImageGenerator for CassetteReplay {
    fn generate(&self, prompt: &Prompt, sub_seed: u64) -> Result<GeneratedImage, BackendError> {
        let entry = self.next_entry(&generate_digest(prompt, sub_seed))?;
        if entry.status != "ok" {
            return Err(recorded_error(&entry.response));
        }
        let bad = |what: &str| BackendError::InvalidResponse(format!("cassette generation response: {what}"));
        let content = entry
            .response
            .get("content_b64")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing content_b64"))
            .and_then(|s| B64.decode(s).map_err(|e| bad(&e.to_string())))?;
        let media_kind: MediaKind = entry
            .response
            .get("media_kind")
            .cloned()
            .ok_or_else(|| bad("missing media_kind"))
            .and_then(|v| serde_json::from_value(v).map_err(|e| bad(&e.to_string())))?;
        let metadata = entry
            .response
            .get("metadata")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| bad(&e.to_string()))?
            .unwrap_or_default();
        Ok(GeneratedImage {
            content,
            media_kind,
            metadata,
        })
    }
}
