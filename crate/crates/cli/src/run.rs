//! `run` and `replay`.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use gems_core::agents::{template_digest, TemplateSet};
use gems_core::backends::{
    BackendSet, CassetteLog, CassetteReplay, HttpGenerator, HttpReasoner, Policy, ReqwestTransport,
    SyntheticWorldConfig,
};
use gems_core::skills::{self, SkillRegistry};
use gems_core::store::{NullSink, RunManifest, RunStore, StoreError};
use gems_core::types::{Outcome, RunId, Trajectory, UserPrompt, LAYOUT_VERSION};
use gems_core::{run_loop, EngineError, LoopConfig};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{BackendKind, RefinerKind, Settings};
use crate::{EXIT_EXHAUSTED, EXIT_FAILURE, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Error)]
pub enum SetupError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failure(String),
}

impl SetupError {
    pub fn exit_code(&self) -> i32 {
        match self {
            SetupError::Usage(_) => EXIT_USAGE,
            SetupError::Failure(_) => EXIT_FAILURE,
        }
    }
}

pub fn refiner_policy(kind: RefinerKind) -> Policy {
    match kind {
        RefinerKind::FixOne => Policy::FixOne,
        RefinerKind::NoOp => Policy::NoOp,
    }
}

/// Backend description stored in `run.json`. Holds no credentials.
pub fn describe_backend(settings: &Settings) -> Value {
    match settings.backend {
        BackendKind::Synthetic => json!({
            "kind": "synthetic",
            "p": settings.world.base_inclusion_probability,
            "g": settings.world.emphasis_gain,
            "refiner": settings.refiner,
        }),
        BackendKind::Http => json!({
            "kind": "http",
            "base_url": settings.http.base_url,
            "model": settings.http.model,
            "image_model": settings.http.image_model,
            "auth_env": settings.http.auth_env,
        }),
    }
}

pub fn build_backends(settings: &Settings) -> Result<BackendSet, SetupError> {
    match settings.backend {
        BackendKind::Synthetic => Ok(BackendSet::synthetic(settings.world, refiner_policy(settings.refiner))),
        BackendKind::Http => {
            let transport = Arc::new(
                ReqwestTransport::new(settings.parallel.max(2))
                    .map_err(|e| SetupError::Failure(e.to_string()))?,
            );
            let reasoner = Arc::new(HttpReasoner::new(settings.http.reasoner_endpoint(), transport.clone()));
            let generator = Arc::new(HttpGenerator::new(settings.http.generator_endpoint(), transport));
            Ok(BackendSet::new(reasoner.clone(), generator, reasoner))
        }
    }
}

fn synthetic_from_description(desc: &Value) -> Option<BackendSet> {
    if desc.get("kind")?.as_str()? != "synthetic" {
        return None;
    }
    let world = SyntheticWorldConfig::new(desc.get("p")?.as_f64()?, desc.get("g")?.as_f64()?);
    let refiner: RefinerKind = serde_json::from_value(desc.get("refiner")?.clone()).ok()?;
    Some(BackendSet::synthetic(world, refiner_policy(refiner)))
}

pub fn load_skills(dir: Option<&Path>) -> Result<SkillRegistry, SetupError> {
    match dir {
        None => Ok(SkillRegistry::empty()),
        Some(d) => skills::scan(d).map_err(|e| SetupError::Failure(e.to_string())),
    }
}

pub fn load_templates(dir: Option<&Path>) -> Result<TemplateSet, SetupError> {
    match dir {
        None => Ok(TemplateSet::builtin()),
        Some(d) => TemplateSet::load_dir(d).map_err(|e| SetupError::Failure(e.to_string())),
    }
}

/// Shared, read-only state for every run of one `run` command.
pub struct RunContext {
    pub settings: Settings,
    pub backends: BackendSet,
    pub skills: SkillRegistry,
    pub templates: TemplateSet,
    pub store: RunStore,
}

impl RunContext {
    pub fn new(settings: Settings) -> Result<RunContext, SetupError> {
        let skills = load_skills(settings.skills_dir.as_deref())?;
        let templates = load_templates(settings.templates_dir.as_deref())?;
        let backends = build_backends(&settings)?;
        let store = RunStore::new(&settings.out_dir);
        Ok(RunContext {
            settings,
            backends,
            skills,
            templates,
            store,
        })
    }

    fn manifest(&self, run_id: &RunId) -> RunManifest {
        RunManifest {
            layout_version: LAYOUT_VERSION,
            run_id: run_id.clone(),
            config: self.settings.loop_config.clone(),
            backend: describe_backend(&self.settings),
            captured: self.settings.capture,
            skills_dir: self.settings.skills_dir.as_ref().map(|p| p.display().to_string()),
            registry_digest: self.skills.manifest().registry_digest.clone(),
            templates_dir: self.settings.templates_dir.as_ref().map(|p| p.display().to_string()),
            template_digest: template_digest(&self.templates),
        }
    }

    /// Executes and persists one run.
    pub fn run_one(&self, prompt: &str) -> RunReport {
        let user_prompt = match UserPrompt::new(prompt) {
            Ok(u) => u,
            Err(e) => return RunReport::failed(None, format!("invalid prompt: {e}"), EXIT_USAGE),
        };
        let run_id = user_prompt.run_id.clone();
        let mut writer = match self.store.create_run(&run_id, &self.manifest(&run_id)) {
            Ok(w) => w,
            Err(e) => return RunReport::failed(Some(run_id), e.to_string(), EXIT_FAILURE),
        };
        let backends = if self.settings.capture {
            match CassetteLog::new(writer.cassette_dir()) {
                Ok(log) => self.backends.recording(Arc::new(log)),
                Err(e) => return RunReport::failed(Some(run_id), format!("cannot create cassette dir: {e}"), EXIT_FAILURE),
            }
        } else {
            self.backends.clone()
        };
        let result = run_loop(
            user_prompt,
            &self.settings.loop_config,
            &backends,
            &self.skills,
            &self.templates,
            &mut writer,
        );
        let run_dir = writer.dir().to_path_buf();
        match result {
            Ok(out) => {
                let outcome = out.trajectory.outcome.expect("finished run");
                let final_artifact = run_dir.join(&out.trajectory.iterations[outcome.final_iteration() as usize - 1].artifact.file);
                RunReport::from_trajectory(&out.trajectory, Some(final_artifact))
            }
            Err(EngineError::Aborted { partial, .. }) => RunReport::from_trajectory(&partial, None),
            Err(e) => RunReport::failed(Some(run_id), e.to_string(), EXIT_USAGE),
        }
    }

    /// Runs every prompt with at most `settings.parallel` in flight. Reports
    /// come back in input order.
    pub fn run_batch(&self, prompts: &[String]) -> Vec<RunReport> {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<RunReport>>> = Mutex::new(vec![None; prompts.len()]);
        let workers = self.settings.parallel.min(prompts.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(prompt) = prompts.get(i) else { break };
                    let report = self.run_one(prompt);
                    slots.lock().expect("report lock")[i] = Some(report);
                });
            }
        });
        slots
            .into_inner()
            .expect("report lock")
            .into_iter()
            .map(|r| r.expect("every prompt ran"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub run_id: Option<RunId>,
    pub criteria: usize,
    pub pass_counts: Vec<usize>,
    pub outcome: Option<Outcome>,
    pub abort: Option<String>,
    pub final_artifact: Option<PathBuf>,
    pub replay_digest: Option<String>,
    pub exit_code: i32,
}

impl RunReport {
    fn failed(run_id: Option<RunId>, reason: String, exit_code: i32) -> RunReport {
        RunReport {
            run_id,
            criteria: 0,
            pass_counts: Vec::new(),
            outcome: None,
            abort: Some(reason),
            final_artifact: None,
            replay_digest: None,
            exit_code,
        }
    }

    fn from_trajectory(t: &Trajectory, final_artifact: Option<PathBuf>) -> RunReport {
        let exit_code = match t.outcome {
            Some(Outcome::EarlySuccess { .. }) => EXIT_OK,
            Some(Outcome::BudgetExhausted { .. }) => EXIT_EXHAUSTED,
            None => EXIT_FAILURE,
        };
        RunReport {
            run_id: Some(t.run_id.clone()),
            criteria: t.criteria.len(),
            pass_counts: t.pass_counts(),
            outcome: t.outcome,
            abort: t.abort.as_ref().map(|a| {
                let at = a.iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default();
                format!("aborted during {}{at}: {}", a.phase.as_str(), a.reason)
            }),
            final_artifact,
            replay_digest: Some(t.replay_digest()),
            exit_code,
        }
    }

    pub fn outcome_line(&self) -> String {
        match (&self.outcome, &self.abort) {
            (Some(Outcome::EarlySuccess { iteration }), _) => {
                format!("outcome: early_success at iteration {iteration}")
            }
            (Some(Outcome::BudgetExhausted { iteration }), _) => {
                format!("outcome: budget_exhausted, best iteration {iteration}")
            }
            (None, Some(reason)) => format!("outcome: {reason}"),
            (None, None) => "outcome: unknown".to_string(),
        }
    }

    pub fn write_text(&self, out: &mut dyn Write) -> std::io::Result<()> {
        if let Some(id) = &self.run_id {
            writeln!(out, "run_id: {id}")?;
        }
        for (i, c) in self.pass_counts.iter().enumerate() {
            writeln!(out, "iteration {}: {c}/{} pass", i + 1, self.criteria)?;
        }
        writeln!(out, "{}", self.outcome_line())?;
        if let Some(p) = &self.final_artifact {
            writeln!(out, "final artifact: {}", p.display())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "run_id": self.run_id,
            "criteria": self.criteria,
            "pass_counts": self.pass_counts,
            "outcome": self.outcome,
            "abort": self.abort,
            "final_artifact": self.final_artifact,
            "replay_digest": self.replay_digest,
            "exit_code": self.exit_code,
        })
    }
}

/// Worst exit code over a batch: abort beats exhausted beats success.
pub fn batch_exit_code(reports: &[RunReport]) -> i32 {
    let codes: Vec<i32> = reports.iter().map(|r| r.exit_code).collect();
    [EXIT_USAGE, EXIT_FAILURE, EXIT_EXHAUSTED]
        .into_iter()
        .find(|c| codes.contains(c))
        .unwrap_or(EXIT_OK)
}

/// One prompt per line; blank lines and `#` comments are skipped.
pub fn read_batch(path: &Path) -> std::io::Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Setup(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub run_id: RunId,
    pub recorded_digest: String,
    pub replayed_digest: String,
    /// Abort of the re-execution, if any (for example a missing cassette).
    pub abort: Option<String>,
    pub notes: Vec<String>,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.recorded_digest == self.replayed_digest
    }
}

/// Re-executes a stored run from its cassettes, or from its seed when the
/// backend is synthetic and nothing was captured.
pub fn replay(store: &RunStore, run_id: &RunId) -> Result<ReplayReport, ReplayError> {
    let loaded = store.load_trajectory(run_id)?;
    let manifest = store.load_manifest(run_id)?;
    let recorded = loaded.trajectory;
    let mut notes = loaded.warnings;

    let mut cassettes = None;
    let backends = if manifest.captured {
        let replay = Arc::new(CassetteReplay::new(
            store.run_dir(run_id).join(gems_core::store::CASSETTES_DIR),
        ));
        cassettes = Some(replay.clone());
        BackendSet::replaying(replay)
    } else {
        synthetic_from_description(&manifest.backend).ok_or_else(|| {
            ReplayError::Setup("run was not captured and its backend is not synthetic; nothing to replay from".into())
        })?
    };
    let skills = load_skills(manifest.skills_dir.as_deref().map(Path::new))
        .map_err(|e| ReplayError::Setup(e.to_string()))?;
    if skills.manifest().registry_digest != manifest.registry_digest {
        notes.push("skill registry changed since the run was recorded".into());
    }
    let templates = load_templates(manifest.templates_dir.as_deref().map(Path::new))
        .map_err(|e| ReplayError::Setup(e.to_string()))?;
    if template_digest(&templates) != manifest.template_digest {
        notes.push("prompt templates changed since the run was recorded".into());
    }
    let config = LoopConfig {
        random_seed: Some(recorded.seed),
        ..manifest.config.clone()
    };
    let (replayed, abort) = match run_loop(
        recorded.user_prompt.clone(),
        &config,
        &backends,
        &skills,
        &templates,
        &mut NullSink,
    ) {
        Ok(out) => (out.trajectory, None),
        Err(EngineError::Aborted { partial, cause, .. }) => (*partial, Some(cause.to_string())),
        Err(e) => return Err(ReplayError::Setup(e.to_string())),
    };
    if let Some(c) = cassettes {
        notes.extend(c.mismatches());
    }
    Ok(ReplayReport {
        run_id: run_id.clone(),
        recorded_digest: recorded.replay_digest(),
        replayed_digest: replayed.replay_digest(),
        abort,
        notes,
    })
}
