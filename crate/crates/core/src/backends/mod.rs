//! Backend abstraction: text reasoner, image generator, image judge.

mod cassette;
mod http;
mod scripted;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{ReasonerEnvelope, Role};
use crate::types::{MediaKind, Prompt};

pub use cassette::{CassetteEntry, CassetteLog, CassetteReplay};
pub use http::{
    HttpEndpointConfig, HttpGenerator, HttpReasoner, HttpResponse, ReqwestTransport, Transport,
};
pub use scripted::{Policy, ReplyFn, ScriptedReasoner};
pub use synthetic::{
    feature_map, probe_feature, synthetic_verify, SyntheticGenerator, SyntheticJudge, SyntheticSpec,
    SyntheticWorldConfig,
};

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {detail}")]
    Unavailable { attempts: u32, detail: String },
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("generation failed: {0}")]
    GenerationFailure(String),
    #[error("malformed backend response: {0}")]
    InvalidResponse(String),
    #[error("no scripted policy for role {0}")]
    UnscriptedRole(Role),
    #[error("missing cassette {index} ({path})")]
    MissingCassette { index: usize, path: String },
}

pub trait TextReasoner: Send + Sync {
    fn complete(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError>;
}

pub trait ImageJudge: Send + Sync {
    fn judge(&self, envelope: &ReasonerEnvelope) -> Result<String, BackendError>;
}

/// Raw generator output; the engine wraps it into an `ImageArtifact`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedImage {
    pub content: Vec<u8>,
    pub media_kind: MediaKind,
    pub metadata: BTreeMap<String, String>,
}

pub trait ImageGenerator: Send + Sync {
    fn generate(&self, prompt: &Prompt, sub_seed: u64) -> Result<GeneratedImage, BackendError>;
}

#[derive(Clone)]
pub struct BackendSet {
    pub reasoner: Arc<dyn TextReasoner>,
    pub generator: Arc<dyn ImageGenerator>,
    pub judge: Arc<dyn ImageJudge>,
}

impl fmt::Debug for BackendSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendSet").finish_non_exhaustive()
    }
}

impl BackendSet {
    pub fn new(
        reasoner: Arc<dyn TextReasoner>,
        generator: Arc<dyn ImageGenerator>,
        judge: Arc<dyn ImageJudge>,
    ) -> Self {
        Self {
            reasoner,
            generator,
            judge,
        }
    }

    /// Synthetic world with the default scripted reasoner policies.
    pub fn synthetic(world: SyntheticWorldConfig, refiner: Policy) -> Self {
        let reasoner = Arc::new(ScriptedReasoner::synthetic_defaults(refiner));
        Self::new(
            reasoner,
            Arc::new(SyntheticGenerator::new(world)),
            Arc::new(SyntheticJudge),
        )
    }

    /// Same backends, with every call recorded to `log`.
    pub fn recording(&self, log: Arc<CassetteLog>) -> Self {
        Self::new(
            Arc::new(cassette::Recorder::new(Arc::clone(&log), ReasonerSlot(Arc::clone(&self.reasoner)))),
            Arc::new(cassette::Recorder::new(Arc::clone(&log), GeneratorSlot(Arc::clone(&self.generator)))),
            Arc::new(cassette::Recorder::new(log, JudgeSlot(Arc::clone(&self.judge)))),
        )
    }

    /// Backends that serve every call from recorded cassettes.
    pub fn replaying(replay: Arc<CassetteReplay>) -> Self {
        Self::new(replay.clone(), replay.clone(), replay)
    }
}

struct ReasonerSlot(Arc<dyn TextReasoner>);
struct GeneratorSlot(Arc<dyn ImageGenerator>);
struct JudgeSlot(Arc<dyn ImageJudge>);
