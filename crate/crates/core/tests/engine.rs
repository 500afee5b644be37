use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use gems_core::agents::{ReasonerEnvelope, Role, RoleInput, TemplateSet};
use gems_core::backends::{
    BackendError, BackendSet, GeneratedImage, ImageGenerator, Policy, ScriptedReasoner,
    SyntheticGenerator, SyntheticWorldConfig,
};
use gems_core::engine::{AbortCause, EngineError};
use gems_core::skills::{self, SkillRegistry};
use gems_core::store::{NullSink, RunManifest, RunStore};
use gems_core::types::{Outcome, Phase, Prompt, LAYOUT_VERSION};
use gems_core::{run_loop, LoopConfig, RunOutput, UserPrompt};

fn config(n_max: u32) -> LoopConfig {
    LoopConfig {
        n_max,
        random_seed: Some(11),
        ..LoopConfig::default()
    }
}

fn backends(reasoner: Arc<ScriptedReasoner>, p: f64) -> BackendSet {
    BackendSet::new(
        reasoner.clone(),
        Arc::new(SyntheticGenerator::new(SyntheticWorldConfig::new(p, 0.25))),
        reasoner,
    )
}

fn defaults(refiner: Policy) -> ScriptedReasoner {
    ScriptedReasoner::synthetic_defaults(refiner).with_capture()
}

fn run(prompt: &str, cfg: &LoopConfig, set: &BackendSet, skills: &SkillRegistry) -> Result<RunOutput, EngineError> {
    run_loop(
        UserPrompt::new(prompt).unwrap(),
        cfg,
        set,
        skills,
        &TemplateSet::builtin(),
        &mut NullSink,
    )
}

fn rewrite_refiner() -> Policy {
    Policy::Fn(Arc::new(|env: &ReasonerEnvelope| match &env.input {
        RoleInput::Refiner { current, .. } => Ok(format!(
            "REASONING: the cat is still missing so the prompt asks for it again.\nPROMPT: {} again",
            current.text
        )),
        _ => unreachable!(),
    }))
}

fn judge_sequence(replies: &[&str]) -> Policy {
    Policy::Sequence(replies.iter().map(|s| s.to_string()).collect())
}

#[test]
fn early_success_on_first_iteration() {
    let r = Arc::new(defaults(Policy::FixOne));
    let out = run("features: cat dog", &config(5), &backends(r.clone(), 1.0), &SkillRegistry::empty()).unwrap();
    assert_eq!(out.trajectory.outcome, Some(Outcome::EarlySuccess { iteration: 1 }));
    assert_eq!(r.calls(Role::Refiner), 0);
    assert_eq!(r.calls(Role::Compressor), 0);
    assert_eq!(out.memory.len(), 1);
    assert!(out.memory.records()[0].experience.is_none());
    assert_eq!(out.final_artifact().iteration, 1);
    out.trajectory.validate().unwrap();
}

#[test]
fn exhausted_run_selects_earliest_best() {
    let r = Arc::new(
        ScriptedReasoner::new()
            .with(Role::PlannerApply, Policy::Reply("PROMPT: a cat on a mat".into()))
            .with(
                Role::Decomposer,
                Policy::Reply("1. Is there a cat?\n2. Is there a mat?\n3. Is it night?\n4. Is it blue?".into()),
            )
            .with(
                Role::Verifier,
                judge_sequence(&[
                    "1. yes\n2. yes\n3. no\n4. no",
                    "1. yes\n2. yes\n3. yes\n4. no",
                    "1. no\n2. yes\n3. no\n4. no",
                ]),
            )
            .with(Role::Refiner, rewrite_refiner())
            .with(Role::Compressor, Policy::ExtractiveFirstSentence),
    );
    let out = run("a cat on a mat", &config(3), &backends(r.clone(), 0.5), &SkillRegistry::empty()).unwrap();
    assert_eq!(out.trajectory.pass_counts(), vec![2, 3, 1]);
    assert_eq!(out.trajectory.outcome, Some(Outcome::BudgetExhausted { iteration: 2 }));
    assert_eq!(out.final_artifact().iteration, 2);
    assert_eq!(r.calls(Role::Refiner), 2);
    assert_eq!(r.calls(Role::Compressor), 2);
    let prompts: Vec<&str> = out.trajectory.iterations.iter().map(|i| i.prompt.as_str()).collect();
    assert_eq!(prompts, ["a cat on a mat", "a cat on a mat again", "a cat on a mat again again"]);
    assert!(out.memory.records()[2].experience.is_none());
}

#[test]
fn single_iteration_budget_never_refines() {
    let r = Arc::new(defaults(Policy::FixOne));
    let out = run("features: a b c d e f", &config(1), &backends(r.clone(), 0.0), &SkillRegistry::empty()).unwrap();
    assert_eq!(out.trajectory.outcome, Some(Outcome::BudgetExhausted { iteration: 1 }));
    assert_eq!(r.calls(Role::Refiner), 0);
}

#[test]
fn unparseable_verdicts_fail_closed() {
    let r = Arc::new(defaults(Policy::FixOne).with(Role::Verifier, Policy::Reply("Looks great, all good!".into())));
    let cfg = LoopConfig {
        verifier_retries: 2,
        ..config(3)
    };
    let out = run("features: cat", &cfg, &backends(r.clone(), 1.0), &SkillRegistry::empty()).unwrap();
    assert_eq!(out.trajectory.outcome, Some(Outcome::BudgetExhausted { iteration: 1 }));
    assert!(out.trajectory.iterations.iter().all(|i| i.verdicts == [false]));
    assert_eq!(r.calls(Role::Verifier), 9);
    assert!(out
        .trajectory
        .warnings
        .iter()
        .any(|w| w.phase == Phase::Verify && w.message.contains("marked failed")));
}

#[test]
fn partial_verdicts_keep_parsed_entries() {
    let r = Arc::new(
        defaults(Policy::FixOne).with(Role::Verifier, Policy::Reply("1. yes - cat\n2. maybe".into())),
    );
    let out = run("features: cat dog", &config(1), &backends(r, 1.0), &SkillRegistry::empty()).unwrap();
    assert_eq!(out.trajectory.iterations[0].verdicts, [true, false]);
}

#[test]
fn decomposition_falls_back_to_whole_prompt() {
    let r = Arc::new(defaults(Policy::FixOne).with(Role::Decomposer, Policy::Reply("no idea".into())));
    let out = run("a red cube", &config(1), &backends(r.clone(), 1.0), &SkillRegistry::empty()).unwrap();
    assert_eq!(r.calls(Role::Decomposer), 2);
    assert_eq!(out.trajectory.criteria.len(), 1);
    assert_eq!(out.trajectory.criteria[0].probe, "Does the image fully satisfy: a red cube?");
}

#[test]
fn decomposition_overflow_is_truncated() {
    let r = Arc::new(defaults(Policy::FixOne));
    let cfg = LoopConfig {
        n_max_criteria: 2,
        ..config(1)
    };
    let out = run("features: a b c", &cfg, &backends(r, 1.0), &SkillRegistry::empty()).unwrap();
    assert_eq!(out.trajectory.criteria.len(), 2);
    assert!(out.trajectory.warnings.iter().any(|w| w.message.contains("truncated to 2")));
}

#[test]
fn criteria_come_from_the_user_prompt() {
    let r = Arc::new(defaults(Policy::FixOne).with(
        Role::PlannerApply,
        Policy::Reply("PROMPT: something else entirely, features: zebra".into()),
    ));
    let out = run("features: cat", &config(1), &backends(r.clone(), 1.0), &SkillRegistry::empty()).unwrap();
    assert_eq!(out.trajectory.criteria[0].probe, "Is there a cat in the image?");
    let decomposer = r.captured().into_iter().find(|e| e.role == Role::Decomposer).unwrap();
    assert!(matches!(decomposer.input, RoleInput::Decomposer { ref user_prompt, .. } if user_prompt == "features: cat"));
}

fn write_skill(root: &Path, slug: &str, name: &str, description: &str, body: &str) {
    let dir = root.join(slug);
    fs::create_dir_all(&dir).unwrap();
    fs::write(
        dir.join("SKILL.md"),
        format!("---\nname: {name}\ndescription: {description}\n---\n{body}"),
    )
    .unwrap();
}

#[test]
fn triggered_skill_body_reaches_prompt_synthesis() {
    let tmp = tempfile::tempdir().unwrap();
    write_skill(tmp.path(), "spatial", "Spatial Intelligence", "left of, right of, above", "ANCHOR-BODY-TEXT\n");
    write_skill(tmp.path(), "text", "Text Rendering", "signs and posters", "OTHER-BODY\n");
    let registry = skills::scan(tmp.path()).unwrap();
    let r = Arc::new(defaults(Policy::FixOne));
    let out = run("a cup left of a plate", &config(1), &backends(r.clone(), 1.0), &registry).unwrap();
    assert_eq!(out.trajectory.triggered_skills, ["Spatial Intelligence"]);
    let apply = r.captured().into_iter().find(|e| e.role == Role::PlannerApply).unwrap();
    assert!(apply.rendered_text.contains("ANCHOR-BODY-TEXT"));
    assert!(!apply.rendered_text.contains("OTHER-BODY"));
    assert_eq!(registry.ledger("Spatial Intelligence").unwrap().body_loads, 1);
    assert_eq!(registry.ledger("Text Rendering").unwrap().body_loads, 0);
}

#[test]
fn selection_is_filtered_and_bounded() {
    let tmp = tempfile::tempdir().unwrap();
    write_skill(tmp.path(), "a", "Alpha", "first", "alpha body\n");
    write_skill(tmp.path(), "b", "Beta", "second", "beta body\n");
    let registry = skills::scan(tmp.path()).unwrap();
    let r = Arc::new(defaults(Policy::FixOne).with(
        Role::PlannerSelect,
        Policy::Reply(r#"{"skills": ["Ghost", "beta", "Alpha"]}"#.into()),
    ));
    let out = run("features: cat", &config(1), &backends(r, 1.0), &registry).unwrap();
    assert_eq!(out.trajectory.triggered_skills, ["Beta"]);
    let msgs: Vec<&str> = out.trajectory.warnings.iter().map(|w| w.message.as_str()).collect();
    assert!(msgs.iter().any(|m| m.contains("unknown skill `Ghost`")));
    assert!(msgs.iter().any(|m| m.contains("keeping the first 1")));
    assert_eq!(registry.ledger("Alpha").unwrap().body_loads, 0);
}

#[test]
fn no_skills_means_no_selection_call() {
    let r = Arc::new(defaults(Policy::FixOne));
    run("features: cat", &config(1), &backends(r.clone(), 1.0), &SkillRegistry::empty()).unwrap();
    assert_eq!(r.calls(Role::PlannerSelect), 0);
    assert_eq!(r.calls(Role::PlannerApply), 1);
}

#[test]
fn unusable_planner_keeps_user_prompt() {
    let r = Arc::new(defaults(Policy::FixOne).with(Role::PlannerApply, Policy::Reply(String::new())));
    let out = run("features: cat", &config(1), &backends(r, 1.0), &SkillRegistry::empty()).unwrap();
    assert_eq!(out.trajectory.iterations[0].prompt, "features: cat");
}

#[test]
fn unchanged_prompt_without_claim_resamples() {
    let r = Arc::new(defaults(Policy::Fn(Arc::new(|env: &ReasonerEnvelope| match &env.input {
        RoleInput::Refiner { current, .. } => Ok(format!("REASONING: same again\nPROMPT: {}", current.text)),
        _ => unreachable!(),
    }))));
    let out = run("features: a b c d e f g h", &config(2), &backends(r.clone(), 0.0), &SkillRegistry::empty()).unwrap();
    assert_eq!(r.calls(Role::Refiner), 2);
    assert_eq!(r.calls(Role::Compressor), 0);
    let t = &out.trajectory;
    assert_eq!(t.iterations[0].prompt, t.iterations[1].prompt);
    assert!(out.memory.records()[0].experience.is_none());
    assert!(t.warnings.iter().any(|w| w.message.contains("resampling the current prompt")));
}

#[test]
fn no_change_keeps_trace_for_memory() {
    let r = Arc::new(defaults(Policy::NoOp));
    let out = run("features: a b c d e f g h", &config(2), &backends(r.clone(), 0.0), &SkillRegistry::empty()).unwrap();
    assert_eq!(r.calls(Role::Refiner), 1);
    assert_eq!(r.calls(Role::Compressor), 1);
    assert_eq!(out.trajectory.iterations[0].prompt, out.trajectory.iterations[1].prompt);
    assert!(out.memory.records()[0].experience.is_some());
}

#[test]
fn refiner_sees_history_and_windowed_images() {
    let r = Arc::new(defaults(Policy::FixOne));
    let cfg = LoopConfig {
        image_context_window: 2,
        ..config(4)
    };
    run("features: a b c d e f g h i j", &cfg, &backends(r.clone(), 0.0), &SkillRegistry::empty()).unwrap();
    let refiner: Vec<_> = r.captured().into_iter().filter(|e| e.role == Role::Refiner).collect();
    assert_eq!(refiner.len(), 3);
    for (k, env) in refiner.iter().enumerate() {
        let current = k as u32 + 1;
        let RoleInput::Refiner { history, .. } = &env.input else { unreachable!() };
        assert_eq!(history.iter().map(|h| h.iteration).collect::<Vec<_>>(), (1..current).collect::<Vec<_>>());
        let attached: Vec<u32> = env.attached_images.iter().map(|i| i.iteration).collect();
        let first = current.saturating_sub(1).max(1);
        assert_eq!(attached, (first..=current).collect::<Vec<_>>());
    }
}

#[test]
fn zero_window_attaches_nothing() {
    let r = Arc::new(defaults(Policy::FixOne));
    let cfg = LoopConfig {
        image_context_window: 0,
        ..config(3)
    };
    run("features: a b c d e f g h", &cfg, &backends(r.clone(), 0.0), &SkillRegistry::empty()).unwrap();
    assert!(r
        .captured()
        .iter()
        .filter(|e| e.role == Role::Refiner)
        .all(|e| e.attached_images.is_empty()));
}

struct FailFrom {
    inner: SyntheticGenerator,
    from: u32,
    calls: AtomicU32,
}

impl ImageGenerator for FailFrom {
    fn generate(&self, prompt: &Prompt, sub_seed: u64) -> Result<GeneratedImage, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if prompt.iteration >= self.from {
            return Err(BackendError::GenerationFailure("content filter".into()));
        }
        self.inner.generate(prompt, sub_seed)
    }
}

#[test]
fn generation_failure_aborts_with_persisted_partial() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let user = UserPrompt::new("features: a b c d e f").unwrap();
    let cfg = config(5);
    let manifest = RunManifest {
        layout_version: LAYOUT_VERSION,
        run_id: user.run_id.clone(),
        config: cfg.clone(),
        backend: serde_json::json!({"kind": "test"}),
        captured: false,
        skills_dir: None,
        registry_digest: String::new(),
        templates_dir: None,
        template_digest: String::new(),
    };
    let mut writer = store.create_run(&user.run_id, &manifest).unwrap();
    let r = Arc::new(defaults(Policy::FixOne));
    let generator = Arc::new(FailFrom {
        inner: SyntheticGenerator::new(SyntheticWorldConfig::new(0.0, 0.0)),
        from: 3,
        calls: AtomicU32::new(0),
    });
    let set = BackendSet::new(r.clone(), generator.clone(), r);
    let err = run_loop(user.clone(), &cfg, &set, &SkillRegistry::empty(), &TemplateSet::builtin(), &mut writer)
        .unwrap_err();
    let EngineError::Aborted { phase, cause, partial, .. } = err else {
        panic!("expected abort")
    };
    assert_eq!(phase, Phase::Generate);
    assert!(matches!(cause, AbortCause::GenerationFailure(_)));
    assert_eq!(partial.iterations.len(), 2);
    assert_eq!(generator.calls.load(Ordering::SeqCst), 4);
    let loaded = store.load_trajectory(&user.run_id).unwrap();
    assert_eq!(loaded.trajectory, *partial);
    let marker = loaded.trajectory.abort.unwrap();
    assert_eq!((marker.phase, marker.iteration), (Phase::Generate, Some(3)));
}

#[test]
fn reasoner_outage_aborts() {
    let r = Arc::new(defaults(Policy::FixOne).with(
        Role::Refiner,
        Policy::Fn(Arc::new(|_: &ReasonerEnvelope| {
            Err(BackendError::Unavailable {
                attempts: 4,
                detail: "503".into(),
            })
        })),
    ));
    let err = run("features: a b c d e f", &config(3), &backends(r, 0.0), &SkillRegistry::empty()).unwrap_err();
    match err {
        EngineError::Aborted { phase, cause, partial, .. } => {
            assert_eq!(phase, Phase::Refine);
            assert!(matches!(cause, AbortCause::BackendUnavailable(_)));
            assert_eq!(partial.iterations.len(), 1);
            assert!(partial.outcome.is_none());
            partial.validate().unwrap();
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn invalid_config_is_rejected_before_any_call() {
    let r = Arc::new(defaults(Policy::FixOne));
    let err = run("features: cat", &config(0), &backends(r.clone(), 1.0), &SkillRegistry::empty()).unwrap_err();
    assert!(matches!(err, EngineError::InvalidInput(_)));
    assert_eq!(r.calls(Role::PlannerApply), 0);
}

#[test]
fn seeded_runs_are_reproducible() {
    let go = || {
        let r = Arc::new(defaults(Policy::FixOne));
        run("features: a b c d", &config(5), &backends(r, 0.5), &SkillRegistry::empty())
            .unwrap()
            .trajectory
    };
    let (a, b) = (go(), go());
    assert_eq!(a.replay_digest(), b.replay_digest());
    assert_ne!(a.run_id, b.run_id);
}
