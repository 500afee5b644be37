//! Domain types shared by every phase of the loop.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;

pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InvalidInput {
    #[error("prompt text is empty")]
    EmptyPrompt,
    #[error("criterion probe is empty")]
    EmptyProbe,
    #[error("criteria set is empty")]
    NoCriteria,
    #[error("criteria set has {got} entries, limit is {limit}")]
    TooManyCriteria { got: usize, limit: usize },
    #[error("artifact content is empty")]
    EmptyArtifact,
    #[error("invalid config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunId(String);

impl RunId {
    pub fn generate() -> Self {
        Self(uuid::Uuid::new_v4().simple().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl From<&str> for RunId {
    fn from(value: &str) -> Self {
        Self(value.to_string())
    }
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The user's original request. Criteria are always derived from this,
/// never from an enhanced prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserPrompt {
    pub text: String,
    pub submitted_at: DateTime<Utc>,
    pub run_id: RunId,
}

impl UserPrompt {
    pub fn new(text: impl Into<String>) -> Result<Self, InvalidInput> {
        Self::with_run_id(text, RunId::generate())
    }

    pub fn with_run_id(text: impl Into<String>, run_id: RunId) -> Result<Self, InvalidInput> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(InvalidInput::EmptyPrompt);
        }
        Ok(Self {
            text,
            submitted_at: Utc::now(),
            run_id,
        })
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.text.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Planner,
    Refiner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub iteration: u32,
    pub origin: Origin,
}

impl Prompt {
    /// The planner's prompt for iteration 1.
    pub fn initial(text: impl Into<String>) -> Result<Self, InvalidInput> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(InvalidInput::EmptyPrompt);
        }
        Ok(Self {
            text,
            iteration: 1,
            origin: Origin::Planner,
        })
    }

    /// A refiner prompt for the iteration after `self`.
    pub fn next(&self, text: impl Into<String>) -> Result<Self, InvalidInput> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(InvalidInput::EmptyPrompt);
        }
        Ok(Self {
            text,
            iteration: self.iteration + 1,
            origin: Origin::Refiner,
        })
    }
}

/// One atomic yes/no probe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    pub id: u32,
    pub probe: String,
}

/// Trims a probe and makes sure it reads as a question.
pub fn normalize_probe(raw: &str) -> Option<String> {
    let trimmed = raw.trim().trim_end_matches(['.', '!', ' ']).trim();
    if trimmed.is_empty() || trimmed == "?" {
        return None;
    }
    if trimmed.ends_with('?') {
        Some(trimmed.to_string())
    } else {
        Some(format!("{trimmed}?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriteriaSet {
    criteria: Vec<Criterion>,
    source_digest: String,
}

impl CriteriaSet {
    /// Builds a set from raw probes, numbering them from 1.
    pub fn new<I, S>(probes: I, source: &UserPrompt, limit: usize) -> Result<Self, InvalidInput>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let criteria = probes
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                normalize_probe(p.as_ref())
                    .map(|probe| Criterion {
                        id: i as u32 + 1,
                        probe,
                    })
                    .ok_or(InvalidInput::EmptyProbe)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(criteria, source.digest(), limit)
    }

    pub fn from_parts(
        criteria: Vec<Criterion>,
        source_digest: String,
        limit: usize,
    ) -> Result<Self, InvalidInput> {
        if criteria.is_empty() {
            return Err(InvalidInput::NoCriteria);
        }
        if criteria.len() > limit {
            return Err(InvalidInput::TooManyCriteria {
                got: criteria.len(),
                limit,
            });
        }
        for (i, c) in criteria.iter().enumerate() {
            if c.id != i as u32 + 1 || normalize_probe(&c.probe).as_deref() != Some(&c.probe) {
                return Err(InvalidInput::EmptyProbe);
            }
        }
        Ok(Self {
            criteria,
            source_digest,
        })
    }

    pub fn criteria(&self) -> &[Criterion] {
        &self.criteria
    }

    pub fn len(&self) -> usize {
        self.criteria.len()
    }

    pub fn is_empty(&self) -> bool {
        self.criteria.is_empty()
    }

    pub fn source_digest(&self) -> &str {
        &self.source_digest
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MediaKind {
    RasterImage,
    SyntheticFeatureMap,
}

impl MediaKind {
    pub fn extension(self) -> &'static str {
        match self {
            MediaKind::RasterImage => "png",
            MediaKind::SyntheticFeatureMap => "json",
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            MediaKind::RasterImage => "image/png",
            MediaKind::SyntheticFeatureMap => "application/json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageArtifact {
    pub iteration: u32,
    pub content: Vec<u8>,
    pub media_kind: MediaKind,
    pub content_digest: String,
    pub backend_metadata: BTreeMap<String, String>,
}

impl ImageArtifact {
    pub fn new(
        iteration: u32,
        content: Vec<u8>,
        media_kind: MediaKind,
        backend_metadata: BTreeMap<String, String>,
    ) -> Result<Self, InvalidInput> {
        if content.is_empty() {
            return Err(InvalidInput::EmptyArtifact);
        }
        let content_digest = sha256_hex(&content);
        Ok(Self {
            iteration,
            content,
            media_kind,
            content_digest,
            backend_metadata,
        })
    }

    pub fn digest_matches(&self) -> bool {
        sha256_hex(&self.content) == self.content_digest
    }
}

/// Serializes `Vec<bool>` as a JSON array of `0`/`1`.
pub mod bits {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bits: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(bits.iter().map(|&b| u8::from(b)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        Vec::<u8>::deserialize(d)?
            .into_iter()
            .map(|b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(D::Error::custom(format!("verdict bit must be 0 or 1, got {other}"))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationVector {
    pub iteration: u32,
    #[serde(with = "bits")]
    pub verdicts: Vec<bool>,
    pub rationales: Vec<String>,
}

impl VerificationVector {
    pub fn pass_count(&self) -> usize {
        pass_count(&self.verdicts)
    }

    pub fn all_pass(&self) -> bool {
        !self.verdicts.is_empty() && self.verdicts.iter().all(|&v| v)
    }

    pub fn failing(&self) -> impl Iterator<Item = usize> + '_ {
        self.verdicts
            .iter()
            .enumerate()
            .filter(|(_, v)| !**v)
            .map(|(i, _)| i)
    }
}

pub fn pass_count(verdicts: &[bool]) -> usize {
    verdicts.iter().filter(|&&v| v).count()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub n_max: u32,
    pub max_triggered_skills: usize,
    pub n_max_criteria: usize,
    pub image_context_window: usize,
    pub verifier_retries: u32,
    pub random_seed: Option<u64>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            n_max: 5,
            max_triggered_skills: 1,
            n_max_criteria: 20,
            image_context_window: 3,
            verifier_retries: 1,
            random_seed: None,
        }
    }
}

/// Upper bound on `n_max`; a run directory holds one artifact per iteration.
pub const N_MAX_CEILING: u32 = 1000;

impl LoopConfig {
    pub fn validate(&self) -> Result<(), InvalidInput> {
        if self.n_max < 1 {
            return Err(InvalidInput::Config("n_max must be at least 1".into()));
        }
        if self.n_max > N_MAX_CEILING {
            return Err(InvalidInput::Config(format!(
                "n_max must be at most {N_MAX_CEILING}"
            )));
        }
        if self.n_max_criteria < 1 {
            return Err(InvalidInput::Config("n_max_criteria must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Plan,
    Decompose,
    Generate,
    Verify,
    Refine,
    Compress,
    Memory,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Plan => "plan",
            Phase::Decompose => "decompose",
            Phase::Generate => "generate",
            Phase::Verify => "verify",
            Phase::Refine => "refine",
            Phase::Compress => "compress",
            Phase::Memory => "memory",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub phase: Phase,
    pub iteration: Option<u32>,
    pub message: String,
}

/// Reference to a persisted artifact. Bytes live in the run store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub file: String,
    pub digest: String,
    pub media_kind: MediaKind,
    pub metadata: BTreeMap<String, String>,
}

impl ArtifactRecord {
    pub fn file_name(iteration: u32, kind: MediaKind) -> String {
        format!("images/iter_{iteration}.{}", kind.extension())
    }

    pub fn for_artifact(artifact: &ImageArtifact) -> Self {
        Self {
            file: Self::file_name(artifact.iteration, artifact.media_kind),
            digest: artifact.content_digest.clone(),
            media_kind: artifact.media_kind,
            metadata: artifact.backend_metadata.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub prompt: String,
    pub origin: Origin,
    pub artifact: ArtifactRecord,
    #[serde(with = "bits")]
    pub verdicts: Vec<bool>,
    pub rationales: Vec<String>,
    pub experience: Option<String>,
}

impl IterationRecord {
    pub fn prompt(&self) -> Prompt {
        Prompt {
            text: self.prompt.clone(),
            iteration: self.iteration,
            origin: self.origin,
        }
    }

    pub fn verification(&self) -> VerificationVector {
        VerificationVector {
            iteration: self.iteration,
            verdicts: self.verdicts.clone(),
            rationales: self.rationales.clone(),
        }
    }

    pub fn pass_count(&self) -> usize {
        pass_count(&self.verdicts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    EarlySuccess { iteration: u32 },
    BudgetExhausted { iteration: u32 },
}

impl Outcome {
    /// Iteration whose artifact is the run's final output.
    pub fn final_iteration(&self) -> u32 {
        match *self {
            Outcome::EarlySuccess { iteration } | Outcome::BudgetExhausted { iteration } => {
                iteration
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortMarker {
    pub phase: Phase,
    pub iteration: Option<u32>,
    pub reason: String,
}

/// Cumulative wall-clock milliseconds spent per phase.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub plan_ms: u64,
    pub decompose_ms: u64,
    pub generate_ms: u64,
    pub verify_ms: u64,
    pub refine_ms: u64,
    pub compress_ms: u64,
    pub total_ms: u64,
}

impl Timing {
    pub fn add(&mut self, phase: Phase, elapsed: std::time::Duration) {
        let ms = elapsed.as_millis() as u64;
        let slot = match phase {
            Phase::Plan => &mut self.plan_ms,
            Phase::Decompose => &mut self.decompose_ms,
            Phase::Generate => &mut self.generate_ms,
            Phase::Verify => &mut self.verify_ms,
            Phase::Refine => &mut self.refine_ms,
            Phase::Compress | Phase::Memory => &mut self.compress_ms,
        };
        *slot += ms;
    }
}

/// The full persisted record of one run. Serializes to `trajectory.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub layout_version: u32,
    pub run_id: RunId,
    pub user_prompt: UserPrompt,
    pub seed: u64,
    pub n_max: u32,
    pub criteria: Vec<Criterion>,
    pub criteria_digest: String,
    pub triggered_skills: Vec<String>,
    pub iterations: Vec<IterationRecord>,
    pub outcome: Option<Outcome>,
    pub abort: Option<AbortMarker>,
    pub warnings: Vec<Warning>,
    pub timing: Timing,
}

/// Volatile fields that differ between otherwise identical executions.
const VOLATILE_KEYS: &[&str] = &["run_id", "timing"];

impl Trajectory {
    pub fn new(user_prompt: UserPrompt, seed: u64, n_max: u32) -> Self {
        Self {
            layout_version: LAYOUT_VERSION,
            run_id: user_prompt.run_id.clone(),
            criteria_digest: user_prompt.digest(),
            user_prompt,
            seed,
            n_max,
            criteria: Vec::new(),
            triggered_skills: Vec::new(),
            iterations: Vec::new(),
            outcome: None,
            abort: None,
            warnings: Vec::new(),
            timing: Timing::default(),
        }
    }

    pub fn criteria_set(&self, limit: usize) -> Result<CriteriaSet, InvalidInput> {
        CriteriaSet::from_parts(self.criteria.clone(), self.criteria_digest.clone(), limit)
    }

    pub fn iteration(&self, k: u32) -> Option<&IterationRecord> {
        self.iterations.iter().find(|r| r.iteration == k)
    }

    pub fn final_record(&self) -> Option<&IterationRecord> {
        self.outcome.and_then(|o| self.iteration(o.final_iteration()))
    }

    pub fn pass_counts(&self) -> Vec<usize> {
        self.iterations.iter().map(|r| r.pass_count()).collect()
    }

    pub fn warn(&mut self, phase: Phase, iteration: Option<u32>, message: impl Into<String>) {
        let message = message.into();
        tracing::warn!(run_id = %self.run_id, ?phase, ?iteration, "{message}");
        self.warnings.push(Warning {
            phase,
            iteration,
            message,
        });
    }

    /// Canonical JSON with run-identity and wall-clock fields removed.
    /// Two executions of the same seeded run produce identical bytes.
    pub fn replay_bytes(&self) -> Vec<u8> {
        let mut value = serde_json::to_value(self).expect("trajectory is always serializable");
        if let Some(map) = value.as_object_mut() {
            for key in VOLATILE_KEYS {
                map.remove(*key);
            }
            if let Some(user) = map.get_mut("user_prompt").and_then(|u| u.as_object_mut()) {
                user.remove("run_id");
                user.remove("submitted_at");
            }
        }
        serde_json::to_vec(&value).expect("json value is always serializable")
    }

    pub fn replay_digest(&self) -> String {
        sha256_hex(&self.replay_bytes())
    }

    /// Checks every invariant of a finished run. Returns all violations found.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        self.check(true)
    }

    /// Like [`Trajectory::validate`], but accepts a run that is still in
    /// progress (no outcome and no abort marker yet).
    pub fn validate_partial(&self) -> Result<(), Vec<String>> {
        self.check(false)
    }

    pub fn is_finished(&self) -> bool {
        self.outcome.is_some() || self.abort.is_some()
    }

    fn check(&self, require_finished: bool) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        let n = self.criteria.len();
        if self.user_prompt.text.trim().is_empty() {
            errs.push("user prompt is empty".to_string());
        }
        if self.iterations.len() > self.n_max as usize {
            errs.push(format!(
                "{} iterations exceed n_max {}",
                self.iterations.len(),
                self.n_max
            ));
        }
        if !self.iterations.is_empty() && n == 0 {
            errs.push("iterations recorded without criteria".to_string());
        }
        for (i, c) in self.criteria.iter().enumerate() {
            if c.id != i as u32 + 1 {
                errs.push(format!("criterion at position {} has id {}", i + 1, c.id));
            }
        }
        for (i, rec) in self.iterations.iter().enumerate() {
            let k = i as u32 + 1;
            if rec.iteration != k {
                errs.push(format!("iteration at position {k} is numbered {}", rec.iteration));
            }
            let expected_origin = if k == 1 { Origin::Planner } else { Origin::Refiner };
            if rec.origin != expected_origin {
                errs.push(format!("iteration {k} has origin {:?}", rec.origin));
            }
            if rec.prompt.trim().is_empty() {
                errs.push(format!("iteration {k} has an empty prompt"));
            }
            if rec.verdicts.len() != n {
                errs.push(format!(
                    "iteration {k} has {} verdicts for {n} criteria",
                    rec.verdicts.len()
                ));
            }
            if rec.experience.as_deref() == Some("") {
                errs.push(format!("iteration {k} has an empty experience"));
            }
        }
        let first_success = self
            .iterations
            .iter()
            .position(|r| !r.verdicts.is_empty() && r.verdicts.iter().all(|&v| v))
            .map(|p| p as u32 + 1);
        match (self.outcome, &self.abort) {
            (Some(_), Some(_)) => errs.push("both outcome and abort marker set".to_string()),
            (None, None) if require_finished => {
                errs.push("neither outcome nor abort marker set".to_string())
            }
            (None, _) => {
                if first_success.is_some_and(|k| (k as usize) < self.iterations.len()) {
                    errs.push("all-pass iteration followed by further iterations".to_string());
                }
            }
            (Some(Outcome::EarlySuccess { iteration }), None) => {
                if first_success != Some(iteration) {
                    errs.push(format!(
                        "early_success({iteration}) but first all-pass iteration is {first_success:?}"
                    ));
                }
                if self.iterations.len() != iteration as usize {
                    errs.push(format!("iterations continue after early_success({iteration})"));
                }
            }
            (Some(Outcome::BudgetExhausted { iteration }), None) => {
                if self.iterations.len() != self.n_max as usize {
                    errs.push(format!(
                        "budget_exhausted with {} of {} iterations",
                        self.iterations.len(),
                        self.n_max
                    ));
                }
                if first_success.is_some() {
                    errs.push("budget_exhausted although an iteration passed everything".to_string());
                }
                let best = crate::engine::select_best_counts(&self.pass_counts());
                if best != Some(iteration) {
                    errs.push(format!(
                        "budget_exhausted({iteration}) but best iteration is {best:?}"
                    ));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}
