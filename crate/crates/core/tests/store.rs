use std::fs;

use gems_core::agents::TemplateSet;
use gems_core::backends::{BackendSet, Policy, SyntheticWorldConfig};
use gems_core::memory::MemoryState;
use gems_core::skills::SkillRegistry;
use gems_core::store::{
    PendingWrite, RunManifest, RunSink, RunStore, StoreError, MEMORY_FILE, TRAJECTORY_FILE,
};
use gems_core::types::{RunId, LAYOUT_VERSION};
use gems_core::{run_loop, LoopConfig, RunOutput, Trajectory, UserPrompt};
use proptest::prelude::*;

fn manifest(run_id: &RunId, cfg: &LoopConfig) -> RunManifest {
    RunManifest {
        layout_version: LAYOUT_VERSION,
        run_id: run_id.clone(),
        config: cfg.clone(),
        backend: serde_json::json!({"kind": "synthetic"}),
        captured: false,
        skills_dir: None,
        registry_digest: String::new(),
        templates_dir: None,
        template_digest: String::new(),
    }
}

fn stored_run(store: &RunStore, prompt: &str, seed: u64, p: f64) -> RunOutput {
    let user = UserPrompt::new(prompt).unwrap();
    let cfg = LoopConfig {
        random_seed: Some(seed),
        ..LoopConfig::default()
    };
    let mut writer = store.create_run(&user.run_id, &manifest(&user.run_id, &cfg)).unwrap();
    let set = BackendSet::synthetic(SyntheticWorldConfig::new(p, 0.25), Policy::FixOne);
    run_loop(user, &cfg, &set, &SkillRegistry::empty(), &TemplateSet::builtin(), &mut writer).unwrap()
}

#[test]
fn persisted_run_loads_back_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let out = stored_run(&store, "features: cat dog lamp", 5, 0.3);
    let loaded = store.load_trajectory(&out.trajectory.run_id).unwrap();
    assert_eq!(loaded.trajectory, out.trajectory);
    assert_eq!(loaded.memory, out.memory);
    assert!(loaded.warnings.is_empty());
    for a in &out.artifacts {
        assert_eq!(&store.load_artifact(&out.trajectory.run_id, a.iteration).unwrap(), a);
    }
    assert_eq!(store.list_runs(), vec![out.trajectory.run_id.clone()]);
}

#[test]
fn tampered_artifact_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let out = stored_run(&store, "features: a b c d e f g", 1, 0.0);
    assert!(out.trajectory.iterations.len() >= 2);
    let id = &out.trajectory.run_id;
    let path = store.run_dir(id).join(&out.trajectory.iterations[1].artifact.file);
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] ^= 1;
    fs::write(&path, bytes).unwrap();
    match store.load_trajectory(id) {
        Err(StoreError::CorruptRun { file, .. }) => assert_eq!(file, "images/iter_2.json"),
        other => panic!("expected CorruptRun, got {other:?}"),
    }
}

#[test]
fn missing_memory_is_a_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let out = stored_run(&store, "features: cat", 2, 1.0);
    fs::remove_file(store.run_dir(&out.trajectory.run_id).join(MEMORY_FILE)).unwrap();
    let loaded = store.load_trajectory(&out.trajectory.run_id).unwrap();
    assert!(loaded.memory.is_empty());
    assert!(loaded.warnings[0].contains("memory.json"));
}

#[test]
fn memory_that_diverges_from_trajectory_is_corrupt() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let out = stored_run(&store, "features: cat", 2, 1.0);
    let path = store.run_dir(&out.trajectory.run_id).join(MEMORY_FILE);
    let text = fs::read_to_string(&path).unwrap().replace("features: cat", "features: dog");
    fs::write(&path, text).unwrap();
    assert!(matches!(
        store.load_trajectory(&out.trajectory.run_id),
        Err(StoreError::CorruptRun { file, .. }) if file == MEMORY_FILE
    ));
}

#[test]
fn unknown_run_is_not_found() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    assert!(matches!(
        store.load_trajectory(&RunId::from("nope")),
        Err(StoreError::RunNotFound(_))
    ));
    assert!(matches!(
        store.load_trajectory(&RunId::from("../etc")),
        Err(StoreError::RunNotFound(_))
    ));
}

#[test]
fn crash_before_rename_keeps_prior_state() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let out = stored_run(&store, "features: cat dog", 3, 1.0);
    let id = &out.trajectory.run_id;
    let dest = store.run_dir(id).join(TRAJECTORY_FILE);
    let before = fs::read(&dest).unwrap();

    let pending = PendingWrite::stage(&dest, b"{\"half\": ").unwrap();
    let temp = pending.temp_path().to_path_buf();
    assert!(temp.exists());
    // A killed process never reaches commit; the temp file may survive.
    std::mem::forget(pending);
    assert_eq!(fs::read(&dest).unwrap(), before);
    assert_eq!(store.load_trajectory(id).unwrap().trajectory, out.trajectory);
    fs::remove_file(temp).unwrap();

    let pending = PendingWrite::stage(&dest, b"garbage").unwrap();
    let temp = pending.temp_path().to_path_buf();
    drop(pending);
    assert!(!temp.exists());
    assert_eq!(fs::read(&dest).unwrap(), before);
}

#[test]
fn persist_iteration_rejects_duplicates_and_gaps() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let source = stored_run(&RunStore::new(tmp.path().join("src")), "features: a b c d e f g h", 4, 0.0);
    assert!(source.trajectory.iterations.len() >= 3);

    let user = source.trajectory.user_prompt.clone();
    let mut writer = store
        .create_run(&user.run_id, &manifest(&user.run_id, &LoopConfig::default()))
        .unwrap();
    let mut empty = source.trajectory.clone();
    empty.iterations.clear();
    empty.outcome = None;
    writer.checkpoint(&empty, &MemoryState::new(user.run_id.clone())).unwrap();

    let recs = &source.trajectory.iterations;
    store.persist_iteration(&user.run_id, &recs[0], &source.artifacts[0]).unwrap();
    assert!(matches!(
        store.persist_iteration(&user.run_id, &recs[0], &source.artifacts[0]),
        Err(StoreError::DuplicateIteration { iteration: 1 })
    ));
    assert!(matches!(
        store.persist_iteration(&user.run_id, &recs[2], &source.artifacts[2]),
        Err(StoreError::IterationGap { expected: 2, got: 3 })
    ));
    store.persist_iteration(&user.run_id, &recs[1], &source.artifacts[1]).unwrap();
    let loaded = store.load_trajectory(&user.run_id).unwrap();
    assert_eq!(loaded.trajectory.iterations, recs[..2]);
    assert!(loaded.warnings.iter().any(|w| w.contains("incomplete")));
}

#[test]
fn writer_rejects_out_of_order_iterations() {
    let tmp = tempfile::tempdir().unwrap();
    let src = RunStore::new(tmp.path().join("src"));
    let source = stored_run(&src, "features: a b c d e f g h", 4, 0.0);
    let store = RunStore::new(tmp.path().join("dst"));
    let id = source.trajectory.run_id.clone();
    let mut writer = store.create_run(&id, &manifest(&id, &LoopConfig::default())).unwrap();
    let memory = MemoryState::new(id.clone());
    let t: &Trajectory = &source.trajectory;
    writer.artifact(&source.artifacts[0]).unwrap();
    writer.iteration(&t.iterations[0], t, &memory).unwrap();
    assert!(matches!(
        writer.iteration(&t.iterations[0], t, &memory),
        Err(StoreError::DuplicateIteration { .. })
    ));
    assert!(matches!(
        writer.iteration(&t.iterations[2], t, &memory),
        Err(StoreError::IterationGap { .. })
    ));
    assert!(matches!(
        writer.iteration(&t.iterations[1], t, &memory),
        Err(StoreError::MissingArtifact { .. })
    ));
}

#[test]
fn identical_bytes_share_digests_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let a = stored_run(&store, "features: cat dog", 9, 1.0);
    let b = stored_run(&store, "features: cat dog", 9, 1.0);
    assert_ne!(a.trajectory.run_id, b.trajectory.run_id);
    assert_eq!(a.trajectory.iterations[0].artifact.digest, b.trajectory.iterations[0].artifact.digest);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn round_trip_over_generated_runs(
        n in 1usize..5,
        p in prop::sample::select(vec![0.0, 0.3, 0.5, 1.0]),
        n_max in 1u32..6,
        seed in any::<u64>(),
        no_op in any::<bool>(),
    ) {
        let tmp = tempfile::tempdir().unwrap();
        let store = RunStore::new(tmp.path());
        let names: Vec<String> = (0..n).map(|i| format!("f{i}")).collect();
        let user = UserPrompt::new(format!("features: {}", names.join(" "))).unwrap();
        let cfg = LoopConfig { n_max, random_seed: Some(seed), ..LoopConfig::default() };
        let mut writer = store.create_run(&user.run_id, &manifest(&user.run_id, &cfg)).unwrap();
        let refiner = if no_op { Policy::NoOp } else { Policy::FixOne };
        let set = BackendSet::synthetic(SyntheticWorldConfig::new(p, 0.25), refiner);
        let out = run_loop(user, &cfg, &set, &SkillRegistry::empty(), &TemplateSet::builtin(), &mut writer).unwrap();
        let loaded = store.load_trajectory(&out.trajectory.run_id).unwrap();
        prop_assert_eq!(&loaded.trajectory, &out.trajectory);
        prop_assert_eq!(&loaded.memory, &out.memory);
    }
}
