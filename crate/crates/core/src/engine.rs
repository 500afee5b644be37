//! The agent loop.
//!
//! ```text
//! plan(U) -> P_1, decompose(U) -> C
//! for i in 1..=n_max:
//!     I_i = generate(P_i); V_i = verify(I_i, C)
//!     all pass      -> early_success(i)
//!     i == n_max    -> budget_exhausted(select_best)
//!     otherwise     -> (P_{i+1}, T_i) = refine(...); E_i = compress(T_i); append record i
//! ```
//!
//! Every phase that calls a model retries on unparseable output and then
//! degrades instead of aborting. Only backend failures and store failures
//! abort a run; the partial trajectory is kept with an abort marker.

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

use crate::agents::{
    self, format_criteria, format_image_ref, format_manifest, format_verdicts, AttachedImage,
    ExpectedSchema, Payload, Role, RoleInput, TemplateSet,
};
use crate::backends::{BackendError, BackendSet, ImageGenerator, ImageJudge, TextReasoner};
use crate::memory::{self, build_view, CompressError, CompressRequest, MemoryRecord, MemoryState, MemoryView, ReasoningTrace};
use crate::seed::{SeedTree, GENERATE};
use crate::skills::SkillRegistry;
use crate::store::{RunSink, StoreError};
use crate::types::{
    AbortMarker, ArtifactRecord, CriteriaSet, ImageArtifact, InvalidInput, IterationRecord,
    LoopConfig, Outcome, Phase, Prompt, RunId, Trajectory, UserPrompt, VerificationVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Success,
    Continue,
    Exhausted,
}

pub fn should_terminate(verdicts: &VerificationVector, iteration: u32, n_max: u32) -> Termination {
    if verdicts.all_pass() {
        Termination::Success
    } else if iteration >= n_max {
        Termination::Exhausted
    } else {
        Termination::Continue
    }
}

/// 1-based index of the highest count; the earliest wins ties.
pub fn select_best_counts(counts: &[usize]) -> Option<u32> {
    let mut best: Option<(usize, usize)> = None;
    for (i, &c) in counts.iter().enumerate() {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| i as u32 + 1)
}

pub fn select_best(trajectory: &Trajectory) -> Option<u32> {
    select_best_counts(&trajectory.pass_counts())
}

#[derive(Debug, Error)]
pub enum AbortCause {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(BackendError),
    #[error("generation failed: {0}")]
    GenerationFailure(BackendError),
    #[error("store failure: {0}")]
    StoreFailure(StoreError),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    InvalidInput(#[from] InvalidInput),
    #[error("run {run_id} aborted during {phase:?}: {cause}")]
    Aborted {
        run_id: RunId,
        phase: Phase,
        cause: AbortCause,
        partial: Box<Trajectory>,
    },
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub memory: MemoryState,
    pub artifacts: Vec<ImageArtifact>,
}

impl RunOutput {
    /// Artifact of the success iteration, or the best one on exhaustion.
    pub fn final_artifact(&self) -> &ImageArtifact {
        let k = self
            .trajectory
            .outcome
            .expect("finished runs have an outcome")
            .final_iteration();
        &self.artifacts[k as usize - 1]
    }
}

fn bindings<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn render(
    templates: &TemplateSet,
    role: Role,
    binds: BTreeMap<String, String>,
    images: Vec<AttachedImage>,
    schema: ExpectedSchema,
    input: RoleInput,
) -> agents::ReasonerEnvelope {
    templates
        .render(role, &binds, images, schema, input)
        .expect("engine bindings cover every template inventory")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanOutcome {
    pub prompt: Prompt,
    pub triggered: Vec<String>,
    pub warnings: Vec<String>,
}

/// Skill selection over the manifest, then prompt synthesis with the
/// bodies of the selected skills.
pub fn plan(
    user_prompt: &UserPrompt,
    skills: &SkillRegistry,
    reasoner: &dyn TextReasoner,
    templates: &TemplateSet,
    max_skills: usize,
) -> Result<PlanOutcome, BackendError> {
    let mut warnings = Vec::new();
    let manifest = skills.expose_manifest();
    let mut triggered: Vec<String> = Vec::new();
    if !manifest.is_empty() && max_skills > 0 {
        let envelope = render(
            templates,
            Role::PlannerSelect,
            bindings([
                ("user_prompt", user_prompt.text.clone()),
                ("skill_manifest", format_manifest(&manifest.headers)),
                ("max_skills", max_skills.to_string()),
            ]),
            Vec::new(),
            ExpectedSchema::SkillSelection,
            RoleInput::PlannerSelect {
                user_prompt: user_prompt.text.clone(),
                manifest: manifest.headers.clone(),
                max_skills,
            },
        );
        let mut selected = None;
        for attempt in 1..=2 {
            let raw = reasoner.complete(&envelope)?;
            match agents::parse(&raw, ExpectedSchema::SkillSelection) {
                Ok(reply) => {
                    let Payload::SelectedSkills(names) = reply.payload else {
                        unreachable!("parser returns the requested schema")
                    };
                    selected = Some(names);
                    break;
                }
                Err(e) => warnings.push(format!("skill selection attempt {attempt}: {}", e.reason)),
            }
        }
        match selected {
            Some(names) => {
                for name in names {
                    match skills.canonical_name(&name) {
                        Some(c) if !triggered.iter().any(|t| t == c) => triggered.push(c.to_string()),
                        Some(_) => {}
                        None => warnings.push(format!("planner selected unknown skill `{name}`; ignored")),
                    }
                }
                if triggered.len() > max_skills {
                    warnings.push(format!(
                        "planner selected {} skills; keeping the first {max_skills}",
                        triggered.len()
                    ));
                    triggered.truncate(max_skills);
                }
            }
            None => warnings.push("skill selection unparseable after 2 attempts; no skill triggered".into()),
        }
    }

    let mut bodies = Vec::new();
    triggered.retain(|name| match skills.resolve(name) {
        Ok(skill) => {
            bodies.push(format!("### {}\n{}", skill.header.name, skill.instructions.trim_end()));
            true
        }
        Err(e) => {
            warnings.push(format!("dropping skill `{name}`: {e}"));
            false
        }
    });
    let instructions = if bodies.is_empty() {
        "(no skill triggered)".to_string()
    } else {
        bodies.join("\n\n")
    };
    let envelope = render(
        templates,
        Role::PlannerApply,
        bindings([
            ("user_prompt", user_prompt.text.clone()),
            ("skill_instructions", instructions),
        ]),
        Vec::new(),
        ExpectedSchema::EnhancedPrompt,
        RoleInput::PlannerApply {
            user_prompt: user_prompt.text.clone(),
            skills: triggered.clone(),
        },
    );
    for attempt in 1..=2 {
        let raw = reasoner.complete(&envelope)?;
        match agents::parse(&raw, ExpectedSchema::EnhancedPrompt) {
            Ok(reply) => {
                let Payload::PromptText(text) = reply.payload else {
                    unreachable!("parser returns the requested schema")
                };
                if let Ok(prompt) = Prompt::initial(text) {
                    return Ok(PlanOutcome {
                        prompt,
                        triggered,
                        warnings,
                    });
                }
                warnings.push(format!("prompt synthesis attempt {attempt}: empty prompt"));
            }
            Err(e) => warnings.push(format!("prompt synthesis attempt {attempt}: {}", e.reason)),
        }
    }
    warnings.push("prompt synthesis unparseable after 2 attempts; using the user prompt".into());
    Ok(PlanOutcome {
        prompt: Prompt::initial(user_prompt.text.clone()).expect("user prompt is non-empty"),
        triggered,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecomposeOutcome {
    pub criteria: CriteriaSet,
    pub warnings: Vec<String>,
}

/// Criteria come from the user prompt, never from the planner's rewrite.
pub fn decompose(
    user_prompt: &UserPrompt,
    reasoner: &dyn TextReasoner,
    templates: &TemplateSet,
    limit: usize,
) -> Result<DecomposeOutcome, BackendError> {
    let mut warnings = Vec::new();
    let envelope = render(
        templates,
        Role::Decomposer,
        bindings([
            ("user_prompt", user_prompt.text.clone()),
            ("max_criteria", limit.to_string()),
        ]),
        Vec::new(),
        ExpectedSchema::CriteriaList,
        RoleInput::Decomposer {
            user_prompt: user_prompt.text.clone(),
            max_criteria: limit,
        },
    );
    for attempt in 1..=2 {
        let raw = reasoner.complete(&envelope)?;
        match agents::parse(&raw, ExpectedSchema::CriteriaList) {
            Ok(reply) => {
                let Payload::Criteria(mut probes) = reply.payload else {
                    unreachable!("parser returns the requested schema")
                };
                if probes.len() > limit {
                    warnings.push(format!(
                        "decomposer returned {} criteria; truncated to {limit}",
                        probes.len()
                    ));
                    probes.truncate(limit);
                }
                match CriteriaSet::new(probes, user_prompt, limit) {
                    Ok(criteria) => return Ok(DecomposeOutcome { criteria, warnings }),
                    Err(e) => warnings.push(format!("decomposition attempt {attempt}: {e}")),
                }
            }
            Err(e) => warnings.push(format!("decomposition attempt {attempt}: {}", e.reason)),
        }
    }
    warnings.push("decomposition unparseable after 2 attempts; using a single whole-prompt criterion".into());
    let probe = format!("Does the image fully satisfy: {}", user_prompt.text.trim());
    let criteria = CriteriaSet::new([probe], user_prompt, limit.max(1))
        .expect("whole-prompt criterion is valid");
    Ok(DecomposeOutcome { criteria, warnings })
}

/// One generation, retried once.
pub fn generate(
    prompt: &Prompt,
    generator: &dyn ImageGenerator,
    sub_seed: u64,
) -> Result<ImageArtifact, BackendError> {
    let mut last = None;
    for _ in 0..2 {
        match generator.generate(prompt, sub_seed) {
            Ok(img) => match ImageArtifact::new(prompt.iteration, img.content, img.media_kind, img.metadata) {
                Ok(a) => return Ok(a),
                Err(e) => last = Some(BackendError::GenerationFailure(e.to_string())),
            },
            Err(e @ BackendError::MissingCassette { .. }) => return Err(e),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt ran"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    pub vector: VerificationVector,
    pub warnings: Vec<String>,
}

/// Judges the artifact against every criterion. Criteria without a usable
/// answer after all retries are marked failed.
pub fn verify(
    artifact: &ImageArtifact,
    criteria: &CriteriaSet,
    judge: &dyn ImageJudge,
    templates: &TemplateSet,
    retries: u32,
) -> Result<VerifyOutcome, BackendError> {
    let n = criteria.len();
    let mut warnings = Vec::new();
    let envelope = render(
        templates,
        Role::Verifier,
        bindings([
            ("image", format_image_ref("image", artifact.iteration, &artifact.content_digest, true)),
            ("criteria", format_criteria(criteria.criteria())),
            ("criteria_count", n.to_string()),
        ]),
        vec![AttachedImage {
            iteration: artifact.iteration,
            digest: artifact.content_digest.clone(),
            media_kind: artifact.media_kind,
            bytes: artifact.content.clone(),
        }],
        ExpectedSchema::VerdictList { count: n },
        RoleInput::Verifier {
            criteria: criteria.criteria().to_vec(),
        },
    );
    let mut last_raw = String::new();
    for attempt in 1..=retries + 1 {
        let raw = judge.judge(&envelope)?;
        match agents::parse(&raw, ExpectedSchema::VerdictList { count: n }) {
            Ok(reply) => {
                let Payload::Verdicts(vs) = reply.payload else {
                    unreachable!("parser returns the requested schema")
                };
                return Ok(VerifyOutcome {
                    vector: VerificationVector {
                        iteration: artifact.iteration,
                        verdicts: vs.iter().map(|v| v.pass).collect(),
                        rationales: vs.into_iter().map(|v| v.rationale).collect(),
                    },
                    warnings,
                });
            }
            Err(e) => {
                warnings.push(format!("verifier attempt {attempt}: {}", e.reason));
                last_raw = raw;
            }
        }
    }
    let partial = agents::parse_verdicts_partial(&last_raw, n);
    let mut verdicts = Vec::with_capacity(n);
    let mut rationales = Vec::with_capacity(n);
    for (c, slot) in criteria.criteria().iter().zip(partial) {
        match slot {
            Some(v) => {
                verdicts.push(v.pass);
                rationales.push(v.rationale);
            }
            None => {
                warnings.push(format!("criterion {}: no parseable verdict; marked failed", c.id));
                verdicts.push(false);
                rationales.push("unverifiable".to_string());
            }
        }
    }
    Ok(VerifyOutcome {
        vector: VerificationVector {
            iteration: artifact.iteration,
            verdicts,
            rationales,
        },
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefineOutcome {
    pub next: Prompt,
    pub trace: ReasoningTrace,
    pub warnings: Vec<String>,
}

pub struct RefineRequest<'a> {
    pub current: &'a Prompt,
    pub artifact: &'a ImageArtifact,
    pub criteria: &'a CriteriaSet,
    pub verdicts: &'a VerificationVector,
    /// Earlier iterations; its images are sent before the current one.
    pub view: &'a MemoryView,
    pub attach_current: bool,
}

/// Writes the next prompt. Unusable replies degrade to resampling the
/// current prompt.
pub fn refine(
    req: &RefineRequest<'_>,
    reasoner: &dyn TextReasoner,
    templates: &TemplateSet,
) -> Result<RefineOutcome, BackendError> {
    let current = req.current;
    let mut warnings = Vec::new();
    let mut images = req.view.images.clone();
    if req.attach_current {
        images.push(AttachedImage {
            iteration: req.artifact.iteration,
            digest: req.artifact.content_digest.clone(),
            media_kind: req.artifact.media_kind,
            bytes: req.artifact.content.clone(),
        });
    }
    let envelope = render(
        templates,
        Role::Refiner,
        bindings([
            ("current_prompt", current.text.clone()),
            (
                "current_image",
                format_image_ref(
                    "current image",
                    req.artifact.iteration,
                    &req.artifact.content_digest,
                    req.attach_current,
                ),
            ),
            ("verdicts", format_verdicts(req.criteria.criteria(), &req.verdicts.verdicts)),
            ("memory", req.view.render(req.criteria.criteria())),
        ]),
        images,
        ExpectedSchema::Refinement,
        RoleInput::Refiner {
            current: current.clone(),
            criteria: req.criteria.criteria().to_vec(),
            verdicts: req.verdicts.verdicts.clone(),
            history: req.view.records.clone(),
        },
    );
    let resample = |text: &str| current.next(text.to_string()).expect("current prompt is non-empty");
    for attempt in 1..=2 {
        let raw = reasoner.complete(&envelope)?;
        match agents::parse(&raw, ExpectedSchema::Refinement) {
            Ok(reply) => {
                let Payload::Refinement {
                    prompt,
                    trace,
                    no_change,
                } = reply.payload
                else {
                    unreachable!("parser returns the requested schema")
                };
                match prompt {
                    Some(p) if p != current.text => {
                        return Ok(RefineOutcome {
                            next: resample(&p),
                            trace: ReasoningTrace::new(current.iteration, trace),
                            warnings,
                        });
                    }
                    _ if no_change => {
                        warnings.push("refiner reports that no prompt change can help; resampling".into());
                        return Ok(RefineOutcome {
                            next: resample(&current.text),
                            trace: ReasoningTrace::new(current.iteration, trace),
                            warnings,
                        });
                    }
                    _ => warnings.push(format!(
                        "refinement attempt {attempt}: prompt unchanged without a no_change claim"
                    )),
                }
            }
            Err(e) => warnings.push(format!("refinement attempt {attempt}: {}", e.reason)),
        }
    }
    warnings.push("refinement unusable after 2 attempts; resampling the current prompt".into());
    Ok(RefineOutcome {
        next: resample(&current.text),
        trace: ReasoningTrace::new(current.iteration, String::new()),
        warnings,
    })
}

/// Everything a run needs besides the prompt. Shareable across threads.
#[derive(Debug, Clone, Copy)]
pub struct Engine<'a> {
    pub config: &'a LoopConfig,
    pub backends: &'a BackendSet,
    pub skills: &'a SkillRegistry,
    pub templates: &'a TemplateSet,
}

struct RunState<'s> {
    trajectory: Trajectory,
    memory: MemoryState,
    sink: &'s mut dyn RunSink,
    started: Instant,
}

impl RunState<'_> {
    fn warn_all(&mut self, phase: Phase, iteration: Option<u32>, warnings: Vec<String>) {
        for w in warnings {
            self.trajectory.warn(phase, iteration, w);
        }
    }

    fn abort(mut self, phase: Phase, iteration: Option<u32>, cause: AbortCause) -> EngineError {
        tracing::error!(run_id = %self.trajectory.run_id, ?phase, ?iteration, "run aborted: {cause}");
        self.trajectory.abort = Some(AbortMarker {
            phase,
            iteration,
            reason: cause.to_string(),
        });
        self.trajectory.timing.total_ms = self.started.elapsed().as_millis() as u64;
        if let Err(e) = self.sink.checkpoint(&self.trajectory, &self.memory) {
            tracing::error!("could not persist the abort marker: {e}");
        }
        EngineError::Aborted {
            run_id: self.trajectory.run_id.clone(),
            phase,
            cause,
            partial: Box::new(self.trajectory),
        }
    }
}

impl Engine<'_> {
    pub fn run(&self, user_prompt: UserPrompt, sink: &mut dyn RunSink) -> Result<RunOutput, EngineError> {
        let config = self.config;
        config.validate()?;
        let seeds = match config.random_seed {
            Some(s) => SeedTree::new(s),
            None => SeedTree::from_entropy(),
        };
        let run_id = user_prompt.run_id.clone();
        tracing::info!(%run_id, seed = seeds.master(), "run started");
        let mut st = RunState {
            trajectory: Trajectory::new(user_prompt.clone(), seeds.master(), config.n_max),
            memory: MemoryState::new(run_id),
            sink,
            started: Instant::now(),
        };

        let t = Instant::now();
        let planned = plan(
            &user_prompt,
            self.skills,
            self.backends.reasoner.as_ref(),
            self.templates,
            config.max_triggered_skills,
        );
        st.trajectory.timing.add(Phase::Plan, t.elapsed());
        let planned = match planned {
            Ok(p) => p,
            Err(e) => return Err(st.abort(Phase::Plan, None, AbortCause::BackendUnavailable(e))),
        };
        st.warn_all(Phase::Plan, None, planned.warnings);
        st.trajectory.triggered_skills = planned.triggered;

        let t = Instant::now();
        let decomposed = decompose(
            &user_prompt,
            self.backends.reasoner.as_ref(),
            self.templates,
            config.n_max_criteria,
        );
        st.trajectory.timing.add(Phase::Decompose, t.elapsed());
        let decomposed = match decomposed {
            Ok(d) => d,
            Err(e) => return Err(st.abort(Phase::Decompose, None, AbortCause::BackendUnavailable(e))),
        };
        st.warn_all(Phase::Decompose, None, decomposed.warnings);
        let criteria = decomposed.criteria;
        st.trajectory.criteria = criteria.criteria().to_vec();
        st.trajectory.criteria_digest = criteria.source_digest().to_string();
        if let Err(e) = st.sink.checkpoint(&st.trajectory, &st.memory) {
            return Err(st.abort(Phase::Decompose, None, AbortCause::StoreFailure(e)));
        }

        let mut artifacts: Vec<ImageArtifact> = Vec::new();
        let mut prompt = planned.prompt;
        for i in 1..=config.n_max {
            let t = Instant::now();
            let generated = generate(&prompt, self.backends.generator.as_ref(), seeds.derive(GENERATE, u64::from(i)));
            st.trajectory.timing.add(Phase::Generate, t.elapsed());
            let artifact = match generated {
                Ok(a) => a,
                Err(e) => return Err(st.abort(Phase::Generate, Some(i), AbortCause::GenerationFailure(e))),
            };
            if let Err(e) = st.sink.artifact(&artifact) {
                return Err(st.abort(Phase::Generate, Some(i), AbortCause::StoreFailure(e)));
            }

            let t = Instant::now();
            let verified = verify(
                &artifact,
                &criteria,
                self.backends.judge.as_ref(),
                self.templates,
                config.verifier_retries,
            );
            st.trajectory.timing.add(Phase::Verify, t.elapsed());
            let verified = match verified {
                Ok(v) => v,
                Err(e) => return Err(st.abort(Phase::Verify, Some(i), AbortCause::BackendUnavailable(e))),
            };
            st.warn_all(Phase::Verify, Some(i), verified.warnings);
            let vector = verified.vector;
            let record = IterationRecord {
                iteration: i,
                prompt: prompt.text.clone(),
                origin: prompt.origin,
                artifact: ArtifactRecord::for_artifact(&artifact),
                verdicts: vector.verdicts.clone(),
                rationales: vector.rationales.clone(),
                experience: None,
            };
            st.trajectory.iterations.push(record.clone());
            if let Err(e) = st.sink.iteration(&record, &st.trajectory, &st.memory) {
                return Err(st.abort(Phase::Verify, Some(i), AbortCause::StoreFailure(e)));
            }
            artifacts.push(artifact);
            let artifact = artifacts.last().expect("just pushed");

            let mut memory_record = MemoryRecord {
                iteration: i,
                prompt: prompt.text.clone(),
                artifact_digest: artifact.content_digest.clone(),
                verdicts: vector.verdicts.clone(),
                experience: None,
                trace_tokens: 0,
            };
            let finished = match should_terminate(&vector, i, config.n_max) {
                Termination::Success => Some(Outcome::EarlySuccess { iteration: i }),
                Termination::Exhausted => Some(Outcome::BudgetExhausted {
                    iteration: select_best(&st.trajectory).expect("at least one iteration"),
                }),
                Termination::Continue => None,
            };
            if let Some(outcome) = finished {
                st.memory
                    .append(memory_record)
                    .expect("memory records follow iterations");
                st.trajectory.outcome = Some(outcome);
                st.trajectory.timing.total_ms = st.started.elapsed().as_millis() as u64;
                if let Err(e) = st.sink.checkpoint(&st.trajectory, &st.memory) {
                    return Err(st.abort(Phase::Memory, Some(i), AbortCause::StoreFailure(e)));
                }
                tracing::info!(run_id = %st.trajectory.run_id, ?outcome, "run finished");
                return Ok(RunOutput {
                    trajectory: st.trajectory,
                    memory: st.memory,
                    artifacts,
                });
            }

            let window = config.image_context_window;
            let view = build_view(&st.memory, &artifacts, window.saturating_sub(1));
            st.warn_all(Phase::Memory, Some(i), view.warnings.clone());
            let t = Instant::now();
            let refined = refine(
                &RefineRequest {
                    current: &prompt,
                    artifact,
                    criteria: &criteria,
                    verdicts: &vector,
                    view: &view,
                    attach_current: window > 0,
                },
                self.backends.reasoner.as_ref(),
                self.templates,
            );
            st.trajectory.timing.add(Phase::Refine, t.elapsed());
            let refined = match refined {
                Ok(r) => r,
                Err(e) => return Err(st.abort(Phase::Refine, Some(i), AbortCause::BackendUnavailable(e))),
            };
            st.warn_all(Phase::Refine, Some(i), refined.warnings);

            memory_record.trace_tokens = refined.trace.token_estimate;
            if !refined.trace.is_empty() {
                let t = Instant::now();
                let compressed = memory::compress(
                    &CompressRequest {
                        prompt: &prompt,
                        artifact,
                        criteria: criteria.criteria(),
                        verdicts: &vector,
                        trace: &refined.trace,
                        view: &view,
                    },
                    self.templates,
                    self.backends.reasoner.as_ref(),
                );
                st.trajectory.timing.add(Phase::Compress, t.elapsed());
                match compressed {
                    Ok(c) => {
                        st.warn_all(Phase::Compress, Some(i), c.warnings);
                        memory_record.experience = Some(c.experience);
                    }
                    Err(CompressError::Backend(e)) => {
                        return Err(st.abort(Phase::Compress, Some(i), AbortCause::BackendUnavailable(e)))
                    }
                    Err(CompressError::EmptyTrace) => {}
                }
            }
            st.trajectory.iterations[i as usize - 1].experience =
                memory_record.experience.as_ref().map(|e| e.text.clone());
            st.memory
                .append(memory_record)
                .expect("memory records follow iterations");
            if let Err(e) = st.sink.checkpoint(&st.trajectory, &st.memory) {
                return Err(st.abort(Phase::Memory, Some(i), AbortCause::StoreFailure(e)));
            }
            prompt = refined.next;
        }
        unreachable!("the last iteration always terminates the loop")
    }
}

pub fn run_loop(
    user_prompt: UserPrompt,
    config: &LoopConfig,
    backends: &BackendSet,
    skills: &SkillRegistry,
    templates: &TemplateSet,
    sink: &mut dyn RunSink,
) -> Result<RunOutput, EngineError> {
    Engine {
        config,
        backends,
        skills,
        templates,
    }
    .run(user_prompt, sink)
}
