//! Trajectory memory.
//!
//! Prompts, verdicts and artifact digests are kept verbatim. The only lossy
//! field is the experience, distilled from the refiner's reasoning trace by
//! the compressor and capped at [`COMPRESSION_RATIO_CAP`] of the trace's
//! token count. Tokens are whitespace-delimited words.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    self, format_image_ref, format_verdicts, AttachedImage, ExpectedSchema, Payload, Role,
    RoleInput, TemplateSet,
};
use crate::backends::{BackendError, TextReasoner};
use crate::types::{bits, Criterion, ImageArtifact, MediaKind, Origin, Prompt, RunId, VerificationVector};

pub const COMPRESSION_RATIO_CAP: f64 = 0.35;
/// The cap as an exact fraction, `CAP_NUM / CAP_DEN`.
const CAP_NUM: usize = 35;
const CAP_DEN: usize = 100;

pub fn token_estimate(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Largest experience size allowed for a trace of `trace_tokens` tokens.
pub fn token_budget(trace_tokens: usize) -> usize {
    trace_tokens * CAP_NUM / CAP_DEN
}

pub fn within_cap(experience_tokens: usize, trace_tokens: usize) -> bool {
    experience_tokens * CAP_DEN <= trace_tokens * CAP_NUM
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub iteration: u32,
    pub text: String,
    pub token_estimate: usize,
}

impl ReasoningTrace {
    pub fn new(iteration: u32, text: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            iteration,
            token_estimate: token_estimate(&text),
            text,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.text.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Experience {
    pub iteration: u32,
    pub text: String,
    pub token_estimate: usize,
    /// Produced by extractive truncation instead of the compressor.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryRecord {
    pub iteration: u32,
    pub prompt: String,
    pub artifact_digest: String,
    pub verdicts: Vec<bool>,
    pub experience: Option<Experience>,
    pub trace_tokens: usize,
}

impl MemoryRecord {
    pub fn prompt(&self) -> Prompt {
        Prompt {
            text: self.prompt.clone(),
            iteration: self.iteration,
            origin: if self.iteration == 1 {
                Origin::Planner
            } else {
                Origin::Refiner
            },
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemoryError {
    #[error("expected record for iteration {expected}, got {got}")]
    IterationGap { expected: u32, got: u32 },
    #[error("record {iteration}: experience belongs to iteration {experience_iteration}")]
    MismatchedExperience {
        iteration: u32,
        experience_iteration: u32,
    },
    #[error("corrupt memory file at line {line}, column {column}: {message}")]
    CorruptMemoryFile {
        line: usize,
        column: usize,
        message: String,
    },
}

/// The ordered, append-only record sequence of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryState {
    run_id: RunId,
    records: Vec<MemoryRecord>,
}

impl MemoryState {
    pub fn new(run_id: RunId) -> Self {
        Self {
            run_id,
            records: Vec::new(),
        }
    }

    pub fn run_id(&self) -> &RunId {
        &self.run_id
    }

    pub fn records(&self) -> &[MemoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn append(&mut self, record: MemoryRecord) -> Result<(), MemoryError> {
        let expected = self.records.len() as u32 + 1;
        if record.iteration != expected {
            return Err(MemoryError::IterationGap {
                expected,
                got: record.iteration,
            });
        }
        if let Some(e) = &record.experience {
            if e.iteration != record.iteration {
                return Err(MemoryError::MismatchedExperience {
                    iteration: record.iteration,
                    experience_iteration: e.iteration,
                });
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn serialize(&self) -> Vec<u8> {
        let file = MemoryFile {
            run_id: self.run_id.clone(),
            records: self.records.iter().map(RecordFile::from).collect(),
        };
        serde_json::to_vec_pretty(&file).expect("memory state is always serializable")
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Self, MemoryError> {
        let file: MemoryFile =
            serde_json::from_slice(bytes).map_err(|e| MemoryError::CorruptMemoryFile {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;
        let mut state = MemoryState::new(file.run_id);
        for (pos, rec) in file.records.into_iter().enumerate() {
            let corrupt = |message: String| MemoryError::CorruptMemoryFile {
                line: 0,
                column: 0,
                message: format!("record {}: {message}", pos + 1),
            };
            let experience = match (rec.experience, rec.experience_tokens) {
                (None, None) => None,
                (Some(text), Some(tokens)) => {
                    if text.is_empty() {
                        return Err(corrupt("experience is an empty string".into()));
                    }
                    if tokens != token_estimate(&text) {
                        return Err(corrupt(format!(
                            "experience_tokens {tokens} does not match text ({})",
                            token_estimate(&text)
                        )));
                    }
                    Some(Experience {
                        iteration: rec.iteration,
                        text,
                        token_estimate: tokens,
                        fallback: rec.experience_fallback,
                    })
                }
                _ => return Err(corrupt("experience and experience_tokens disagree".into())),
            };
            state
                .append(MemoryRecord {
                    iteration: rec.iteration,
                    prompt: rec.prompt,
                    artifact_digest: rec.artifact_digest,
                    verdicts: rec.verdicts,
                    experience,
                    trace_tokens: rec.trace_tokens,
                })
                .map_err(|e| corrupt(e.to_string()))?;
        }
        Ok(state)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemoryFile {
    run_id: RunId,
    records: Vec<RecordFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordFile {
    iteration: u32,
    prompt: String,
    #[serde(with = "bits")]
    verdicts: Vec<bool>,
    artifact_digest: String,
    experience: Option<String>,
    trace_tokens: usize,
    experience_tokens: Option<usize>,
    #[serde(default)]
    experience_fallback: bool,
}

impl From<&MemoryRecord> for RecordFile {
    fn from(r: &MemoryRecord) -> Self {
        Self {
            iteration: r.iteration,
            prompt: r.prompt.clone(),
            verdicts: r.verdicts.clone(),
            artifact_digest: r.artifact_digest.clone(),
            experience: r.experience.as_ref().map(|e| e.text.clone()),
            trace_tokens: r.trace_tokens,
            experience_tokens: r.experience.as_ref().map(|e| e.token_estimate),
            experience_fallback: r.experience.as_ref().is_some_and(|e| e.fallback),
        }
    }
}

/// Looks up artifact bytes by digest.
pub trait ArtifactResolver {
    fn resolve(&self, iteration: u32, digest: &str) -> Option<(Vec<u8>, MediaKind)>;
}

impl ArtifactResolver for [ImageArtifact] {
    fn resolve(&self, iteration: u32, digest: &str) -> Option<(Vec<u8>, MediaKind)> {
        self.iter()
            .find(|a| a.iteration == iteration && a.content_digest == digest)
            .map(|a| (a.content.clone(), a.media_kind))
    }
}

impl ArtifactResolver for Vec<ImageArtifact> {
    fn resolve(&self, iteration: u32, digest: &str) -> Option<(Vec<u8>, MediaKind)> {
        self.as_slice().resolve(iteration, digest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewRecord {
    pub iteration: u32,
    pub prompt: String,
    pub verdicts: Vec<bool>,
    pub experience: Option<String>,
    pub artifact_digest: String,
    pub image_attached: bool,
}

/// What the refiner and compressor see of earlier iterations: every
/// record as text, and raw images for only the newest `window` records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryView {
    pub records: Vec<ViewRecord>,
    pub images: Vec<AttachedImage>,
    pub warnings: Vec<String>,
}

pub fn build_view(state: &MemoryState, artifacts: &dyn ArtifactResolver, window: usize) -> MemoryView {
    let first_with_image = state.records.len().saturating_sub(window);
    let mut view = MemoryView::default();
    for (pos, rec) in state.records.iter().enumerate() {
        let mut attached = false;
        if pos >= first_with_image {
            match artifacts.resolve(rec.iteration, &rec.artifact_digest) {
                Some((bytes, media_kind)) => {
                    view.images.push(AttachedImage {
                        iteration: rec.iteration,
                        digest: rec.artifact_digest.clone(),
                        media_kind,
                        bytes,
                    });
                    attached = true;
                }
                None => view.warnings.push(format!(
                    "missing artifact for iteration {} (sha256 {}); placeholder used",
                    rec.iteration, rec.artifact_digest
                )),
            }
        }
        view.records.push(ViewRecord {
            iteration: rec.iteration,
            prompt: rec.prompt.clone(),
            verdicts: rec.verdicts.clone(),
            experience: rec.experience.as_ref().map(|e| e.text.clone()),
            artifact_digest: rec.artifact_digest.clone(),
            image_attached: attached,
        });
    }
    view
}

impl MemoryView {
    /// Text block substituted for the `memory` placeholder.
    pub fn render(&self, criteria: &[Criterion]) -> String {
        if self.records.is_empty() {
            return "(no earlier attempts)".to_string();
        }
        let mut out = Vec::new();
        for r in &self.records {
            out.push(format!("Attempt {}", r.iteration));
            out.push(format!("prompt: {}", r.prompt));
            out.push(format!(
                "verdicts: [{}]",
                r.verdicts
                    .iter()
                    .map(|&v| if v { "1" } else { "0" })
                    .collect::<Vec<_>>()
                    .join(",")
            ));
            let failed: Vec<&str> = criteria
                .iter()
                .zip(&r.verdicts)
                .filter(|(_, &v)| !v)
                .map(|(c, _)| c.probe.as_str())
                .collect();
            if !failed.is_empty() {
                out.push(format!("failed: {}", failed.join(" | ")));
            }
            let placeholder = !r.image_attached && self.warnings.iter().any(|w| w.contains(&r.artifact_digest));
            if placeholder {
                out.push(format!("image: iteration {} [missing artifact]", r.iteration));
            } else {
                out.push(format_image_ref("image", r.iteration, &r.artifact_digest, r.image_attached));
            }
            match &r.experience {
                Some(e) => out.push(format!("experience: {e}")),
                None => out.push("experience: (none)".to_string()),
            }
            out.push(String::new());
        }
        out.pop();
        out.join("\n")
    }
}

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("nothing to compress: reasoning trace is empty")]
    EmptyTrace,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

pub struct CompressRequest<'a> {
    pub prompt: &'a Prompt,
    pub artifact: &'a ImageArtifact,
    pub criteria: &'a [Criterion],
    pub verdicts: &'a VerificationVector,
    pub trace: &'a ReasoningTrace,
    pub view: &'a MemoryView,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Compressed {
    pub experience: Experience,
    pub warnings: Vec<String>,
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "was", "were", "are", "that", "this", "with", "from", "into", "there",
    "image", "prompt", "not", "but", "has", "have", "its", "any", "all",
];

fn content_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= 3)
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
}

/// The experience must mention a failed requirement or something from the trace.
fn is_relevant(experience: &str, req: &CompressRequest<'_>) -> bool {
    let mut pool: std::collections::BTreeSet<String> = content_words(&req.trace.text).collect();
    for j in req.verdicts.failing() {
        if let Some(c) = req.criteria.get(j) {
            pool.extend(content_words(&c.probe));
        }
    }
    content_words(experience).any(|w| pool.contains(&w))
}

/// First `budget` tokens of the trace; at least one token.
pub fn extractive_truncation(trace: &str, budget: usize) -> String {
    trace
        .split_whitespace()
        .take(budget.max(1))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Distils the trace into an experience. Retries once, then truncates.
pub fn compress(
    req: &CompressRequest<'_>,
    templates: &TemplateSet,
    reasoner: &dyn TextReasoner,
) -> Result<Compressed, CompressError> {
    if req.trace.is_empty() {
        return Err(CompressError::EmptyTrace);
    }
    let iteration = req.prompt.iteration;
    let bindings: BTreeMap<String, String> = [
        ("current_prompt", req.prompt.text.clone()),
        (
            "current_image",
            format_image_ref("current image", iteration, &req.artifact.content_digest, false),
        ),
        ("verdicts", format_verdicts(req.criteria, &req.verdicts.verdicts)),
        ("trace", req.trace.text.clone()),
        ("memory", req.view.render(req.criteria)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let envelope = templates
        .render(
            Role::Compressor,
            &bindings,
            Vec::new(),
            ExpectedSchema::Experience,
            RoleInput::Compressor {
                current: req.prompt.clone(),
                criteria: req.criteria.to_vec(),
                verdicts: req.verdicts.verdicts.clone(),
                trace: req.trace.text.clone(),
                history: req.view.records.clone(),
            },
        )
        .expect("compressor bindings cover the inventory");

    let trace_tokens = req.trace.token_estimate;
    let mut warnings = Vec::new();
    for attempt in 1..=2 {
        let raw = reasoner.complete(&envelope)?;
        let text = match agents::parse(&raw, ExpectedSchema::Experience) {
            Ok(reply) => match reply.payload {
                Payload::ExperienceText(t) => t,
                _ => unreachable!("parser returns the requested schema"),
            },
            Err(e) => {
                warnings.push(format!("compressor attempt {attempt}: {}", e.reason));
                continue;
            }
        };
        let tokens = token_estimate(&text);
        if !within_cap(tokens, trace_tokens) {
            warnings.push(format!(
                "compressor attempt {attempt}: {tokens} tokens exceed cap for a {trace_tokens}-token trace"
            ));
            continue;
        }
        if !is_relevant(&text, req) {
            warnings.push(format!(
                "compressor attempt {attempt}: experience mentions no failed criterion or trace content"
            ));
            continue;
        }
        return Ok(Compressed {
            experience: Experience {
                iteration,
                text,
                token_estimate: tokens,
                fallback: false,
            },
            warnings,
        });
    }
    let text = extractive_truncation(&req.trace.text, token_budget(trace_tokens));
    warnings.push("compressor output unusable; experience is an extractive truncation of the trace".into());
    Ok(Compressed {
        experience: Experience {
            iteration,
            token_estimate: token_estimate(&text),
            text,
            fallback: true,
        },
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: u32, exp: Option<&str>) -> MemoryRecord {
        MemoryRecord {
            iteration: i,
            prompt: format!("prompt {i}"),
            artifact_digest: format!("d{i}"),
            verdicts: vec![i.is_multiple_of(2), true],
            experience: exp.map(|t| Experience {
                iteration: i,
                text: t.to_string(),
                token_estimate: token_estimate(t),
                fallback: false,
            }),
            trace_tokens: 10,
        }
    }

    #[test]
    fn append_is_contiguous() {
        let mut m = MemoryState::new(RunId::from("r"));
        m.append(record(1, None)).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(
            m.append(record(3, None)).unwrap_err(),
            MemoryError::IterationGap { expected: 2, got: 3 }
        );
        for i in 2..=5 {
            m.append(record(i, Some("x"))).unwrap();
        }
        let its: Vec<u32> = m.records().iter().map(|r| r.iteration).collect();
        assert_eq!(its, [1, 2, 3, 4, 5]);
    }

    #[test]
    fn round_trip_keeps_absence() {
        let mut m = MemoryState::new(RunId::from("r"));
        m.append(record(1, Some("color words helped"))).unwrap();
        m.append(record(2, None)).unwrap();
        let bytes = m.serialize();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains("\"experience\": null"));
        assert_eq!(MemoryState::deserialize(&bytes).unwrap(), m);
    }

    #[test]
    fn empty_string_experience_is_corrupt() {
        let raw = br#"{"run_id":"r","records":[{"iteration":1,"prompt":"p","verdicts":[1],
            "artifact_digest":"d","experience":"","trace_tokens":3,"experience_tokens":0}]}"#;
        assert!(matches!(
            MemoryState::deserialize(raw),
            Err(MemoryError::CorruptMemoryFile { .. })
        ));
    }

    #[test]
    fn truncated_file_reports_position() {
        let mut m = MemoryState::new(RunId::from("r"));
        m.append(record(1, Some("x"))).unwrap();
        let bytes = m.serialize();
        match MemoryState::deserialize(&bytes[..bytes.len() / 2]) {
            Err(MemoryError::CorruptMemoryFile { line, .. }) => assert!(line > 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn view_windows_images() {
        let artifacts: Vec<ImageArtifact> = (1..=5)
            .map(|i| {
                ImageArtifact::new(i, format!("img{i}").into_bytes(), MediaKind::RasterImage, BTreeMap::new())
                    .unwrap()
            })
            .collect();
        let mut m = MemoryState::new(RunId::from("r"));
        for a in &artifacts {
            let mut r = record(a.iteration, None);
            r.artifact_digest = a.content_digest.clone();
            m.append(r).unwrap();
        }
        let v = build_view(&m, &artifacts, 3);
        assert_eq!(v.records.len(), 5);
        assert_eq!(v.images.iter().map(|i| i.iteration).collect::<Vec<_>>(), [3, 4, 5]);
        assert!(build_view(&m, &artifacts, 0).images.is_empty());
        let empty = build_view(&MemoryState::new(RunId::from("r")), &artifacts, 3);
        assert_eq!(empty, MemoryView::default());

        let v = build_view(&m, &artifacts[..3].to_vec(), 3);
        assert_eq!(v.images.len(), 1);
        assert_eq!(v.warnings.len(), 2);
        assert!(v.render(&[]).contains("[missing artifact]"));
    }

    #[test]
    fn budget_arithmetic() {
        assert_eq!(token_budget(400), 140);
        assert!(within_cap(140, 400));
        assert!(!within_cap(141, 400));
        assert_eq!(token_estimate("  a b\tc\n"), 3);
        assert_eq!(extractive_truncation("one two three four", 2), "one two");
        assert_eq!(extractive_truncation("one two", 0), "one");
    }
}
