//! Run persistence.
//!
//! ```text
//! <root>/<run_id>/
//!     run.json          how the run was configured (for replay)
//!     trajectory.json   rewritten atomically after every phase that adds data
//!     memory.json       memory snapshot, same cadence
//!     images/iter_<i>.<ext>
//!     cassettes/<index>.json   (capture mode only)
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::memory::{ArtifactResolver, MemoryState};
use crate::types::{
    ArtifactRecord, ImageArtifact, IterationRecord, LoopConfig, MediaKind, RunId, Trajectory,
    LAYOUT_VERSION,
};

pub const TRAJECTORY_FILE: &str = "trajectory.json";
pub const MEMORY_FILE: &str = "memory.json";
pub const MANIFEST_FILE: &str = "run.json";
pub const IMAGES_DIR: &str = "images";
pub const CASSETTES_DIR: &str = "cassettes";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("run {0} already exists")]
    RunExists(String),
    #[error("run not found: {0}")]
    RunNotFound(String),
    #[error("iteration {iteration} is already persisted")]
    DuplicateIteration { iteration: u32 },
    #[error("expected iteration {expected}, got {got}")]
    IterationGap { expected: u32, got: u32 },
    #[error("iteration {iteration}: artifact {file} has not been written")]
    MissingArtifact { iteration: u32, file: String },
    #[error("corrupt run: {file}: {detail}")]
    CorruptRun { file: String, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// A fully written temporary file waiting to be renamed over `dest`.
/// Dropping it without [`PendingWrite::commit`] removes the temporary file.
#[derive(Debug)]
pub struct PendingWrite {
    tmp: PathBuf,
    dest: PathBuf,
    settled: bool,
}

impl PendingWrite {
    pub fn stage(dest: &Path, bytes: &[u8]) -> io::Result<Self> {
        let name = dest
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let tmp = dest.with_file_name(format!(
            ".{name}.{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        Ok(Self {
            tmp,
            dest: dest.to_path_buf(),
            settled: false,
        })
    }

    pub fn temp_path(&self) -> &Path {
        &self.tmp
    }

    pub fn commit(mut self) -> io::Result<()> {
        fs::rename(&self.tmp, &self.dest)?;
        self.settled = true;
        if let Some(parent) = self.dest.parent() {
            // directory fsync is best effort; not every platform allows it
            let _ = File::open(parent).and_then(|d| d.sync_all());
        }
        Ok(())
    }

    /// Leaves the temporary file behind, as a crash before the rename would.
    pub fn abandon(mut self) {
        self.settled = true;
    }
}

impl Drop for PendingWrite {
    fn drop(&mut self) {
        if !self.settled {
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

pub fn atomic_write(dest: &Path, bytes: &[u8]) -> io::Result<()> {
    PendingWrite::stage(dest, bytes)?.commit()
}

/// How a run was configured, so it can be replayed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub layout_version: u32,
    pub run_id: RunId,
    pub config: LoopConfig,
    /// Backend description; never contains credentials.
    pub backend: Value,
    pub captured: bool,
    pub skills_dir: Option<String>,
    pub registry_digest: String,
    pub templates_dir: Option<String>,
    pub template_digest: String,
}

/// Receives run state as the loop produces it.
pub trait RunSink {
    fn artifact(&mut self, artifact: &ImageArtifact) -> Result<(), StoreError>;
    fn iteration(
        &mut self,
        record: &IterationRecord,
        trajectory: &Trajectory,
        memory: &MemoryState,
    ) -> Result<(), StoreError>;
    fn checkpoint(&mut self, trajectory: &Trajectory, memory: &MemoryState) -> Result<(), StoreError>;
}

/// Discards everything. For simulations that only need the returned trajectory.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink;

impl RunSink for NullSink {
    fn artifact(&mut self, _: &ImageArtifact) -> Result<(), StoreError> {
        Ok(())
    }

    fn iteration(&mut self, _: &IterationRecord, _: &Trajectory, _: &MemoryState) -> Result<(), StoreError> {
        Ok(())
    }

    fn checkpoint(&mut self, _: &Trajectory, _: &MemoryState) -> Result<(), StoreError> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

/// Writer for one run directory. The only writer of that directory.
#[derive(Debug)]
pub struct RunWriter {
    dir: PathBuf,
    persisted: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedRun {
    pub trajectory: Trajectory,
    pub memory: MemoryState,
    pub warnings: Vec<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let bytes = serde_json::to_vec_pretty(value).expect("run documents serialize");
    atomic_write(path, &bytes).map_err(io_err(path))
}

fn write_state(dir: &Path, trajectory: &Trajectory, memory: &MemoryState) -> Result<(), StoreError> {
    write_json(&dir.join(TRAJECTORY_FILE), trajectory)?;
    let path = dir.join(MEMORY_FILE);
    atomic_write(&path, &memory.serialize()).map_err(io_err(&path))
}

fn valid_run_id(run_id: &str) -> bool {
    !run_id.is_empty()
        && run_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &RunId) -> PathBuf {
        self.root.join(run_id.as_str())
    }

    pub fn exists(&self, run_id: &RunId) -> bool {
        valid_run_id(run_id.as_str()) && self.run_dir(run_id).join(TRAJECTORY_FILE).is_file()
    }

    pub fn list_runs(&self) -> Vec<RunId> {
        let mut ids: Vec<RunId> = fs::read_dir(&self.root)
            .into_iter()
            .flatten()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join(TRAJECTORY_FILE).is_file())
            .map(|e| RunId::from(e.file_name().to_string_lossy().as_ref()))
            .collect();
        ids.sort();
        ids
    }

    /// Creates the run directory and writes `run.json`.
    pub fn create_run(&self, run_id: &RunId, manifest: &RunManifest) -> Result<RunWriter, StoreError> {
        if !valid_run_id(run_id.as_str()) {
            return Err(StoreError::CorruptRun {
                file: run_id.to_string(),
                detail: "run id is not a plain directory name".into(),
            });
        }
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let dir = self.run_dir(run_id);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(StoreError::RunExists(run_id.to_string()));
            }
            Err(e) => return Err(io_err(&dir)(e)),
        }
        let images = dir.join(IMAGES_DIR);
        fs::create_dir(&images).map_err(io_err(&images))?;
        write_json(&dir.join(MANIFEST_FILE), manifest)?;
        Ok(RunWriter { dir, persisted: 0 })
    }

    pub fn load_manifest(&self, run_id: &RunId) -> Result<RunManifest, StoreError> {
        let dir = self.checked_dir(run_id)?;
        let path = dir.join(MANIFEST_FILE);
        let bytes = fs::read(&path).map_err(|e| StoreError::CorruptRun {
            file: MANIFEST_FILE.into(),
            detail: e.to_string(),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptRun {
            file: MANIFEST_FILE.into(),
            detail: e.to_string(),
        })
    }

    fn checked_dir(&self, run_id: &RunId) -> Result<PathBuf, StoreError> {
        let dir = self.run_dir(run_id);
        if !valid_run_id(run_id.as_str()) || !dir.is_dir() {
            return Err(StoreError::RunNotFound(run_id.to_string()));
        }
        Ok(dir)
    }

    /// Appends one iteration to a stored run: writes the artifact bytes and
    /// rewrites `trajectory.json`. Rejects duplicates and gaps.
    pub fn persist_iteration(
        &self,
        run_id: &RunId,
        record: &IterationRecord,
        artifact: &ImageArtifact,
    ) -> Result<(), StoreError> {
        let dir = self.checked_dir(run_id)?;
        let mut trajectory = read_trajectory(&dir)?;
        let expected = trajectory.iterations.len() as u32 + 1;
        if record.iteration < expected {
            return Err(StoreError::DuplicateIteration {
                iteration: record.iteration,
            });
        }
        if record.iteration != expected || artifact.iteration != record.iteration {
            return Err(StoreError::IterationGap {
                expected,
                got: record.iteration,
            });
        }
        write_artifact(&dir, artifact)?;
        trajectory.iterations.push(record.clone());
        write_json(&dir.join(TRAJECTORY_FILE), &trajectory)
    }

    /// Loads a run, re-verifying every artifact digest.
    pub fn load_trajectory(&self, run_id: &RunId) -> Result<LoadedRun, StoreError> {
        let dir = self.checked_dir(run_id)?;
        let trajectory = read_trajectory(&dir)?;
        let mut warnings = Vec::new();
        if trajectory.run_id != *run_id {
            return Err(StoreError::CorruptRun {
                file: TRAJECTORY_FILE.into(),
                detail: format!("run_id is {}, directory is {run_id}", trajectory.run_id),
            });
        }
        if let Err(errs) = trajectory.validate_partial() {
            return Err(StoreError::CorruptRun {
                file: TRAJECTORY_FILE.into(),
                detail: errs.join("; "),
            });
        }
        if !trajectory.is_finished() {
            warnings.push("run is incomplete: no outcome and no abort marker".to_string());
        }
        for rec in &trajectory.iterations {
            read_artifact(&dir, rec)?;
        }
        let memory = match fs::read(dir.join(MEMORY_FILE)) {
            Ok(bytes) => {
                let memory = MemoryState::deserialize(&bytes).map_err(|e| StoreError::CorruptRun {
                    file: MEMORY_FILE.into(),
                    detail: e.to_string(),
                })?;
                check_tiering(&trajectory, &memory)?;
                memory
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                warnings.push(format!("{MEMORY_FILE} is missing; using empty memory"));
                MemoryState::new(run_id.clone())
            }
            Err(e) => return Err(io_err(&dir.join(MEMORY_FILE))(e)),
        };
        for w in &warnings {
            tracing::warn!(run_id = %run_id, "{w}");
        }
        Ok(LoadedRun {
            trajectory,
            memory,
            warnings,
        })
    }

    /// Artifact bytes of iteration `iteration`, digest-checked.
    pub fn load_artifact(&self, run_id: &RunId, iteration: u32) -> Result<ImageArtifact, StoreError> {
        let dir = self.checked_dir(run_id)?;
        let trajectory = read_trajectory(&dir)?;
        let rec = trajectory
            .iteration(iteration)
            .ok_or_else(|| StoreError::CorruptRun {
                file: TRAJECTORY_FILE.into(),
                detail: format!("no iteration {iteration}"),
            })?;
        read_artifact(&dir, rec)
    }

    /// Resolver over the artifacts of a stored run.
    pub fn resolver(&self, run_id: &RunId) -> DirResolver {
        DirResolver {
            dir: self.run_dir(run_id),
        }
    }
}

fn read_trajectory(dir: &Path) -> Result<Trajectory, StoreError> {
    let bytes = fs::read(dir.join(TRAJECTORY_FILE)).map_err(|e| StoreError::CorruptRun {
        file: TRAJECTORY_FILE.into(),
        detail: e.to_string(),
    })?;
    let trajectory: Trajectory = serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptRun {
        file: TRAJECTORY_FILE.into(),
        detail: format!("line {}, column {}: {e}", e.line(), e.column()),
    })?;
    if trajectory.layout_version != LAYOUT_VERSION {
        return Err(StoreError::CorruptRun {
            file: TRAJECTORY_FILE.into(),
            detail: format!(
                "layout version {} (this build reads {LAYOUT_VERSION})",
                trajectory.layout_version
            ),
        });
    }
    Ok(trajectory)
}

fn write_artifact(dir: &Path, artifact: &ImageArtifact) -> Result<(), StoreError> {
    let rel = ArtifactRecord::file_name(artifact.iteration, artifact.media_kind);
    let path = dir.join(&rel);
    if let Ok(existing) = fs::read(&path) {
        if existing == artifact.content {
            return Ok(());
        }
        return Err(StoreError::DuplicateIteration {
            iteration: artifact.iteration,
        });
    }
    atomic_write(&path, &artifact.content).map_err(io_err(&path))
}

fn read_artifact(dir: &Path, rec: &IterationRecord) -> Result<ImageArtifact, StoreError> {
    let expected = ArtifactRecord::file_name(rec.iteration, rec.artifact.media_kind);
    if rec.artifact.file != expected {
        return Err(StoreError::CorruptRun {
            file: TRAJECTORY_FILE.into(),
            detail: format!(
                "iteration {} points at {}, expected {expected}",
                rec.iteration, rec.artifact.file
            ),
        });
    }
    let bytes = fs::read(dir.join(&expected)).map_err(|e| StoreError::CorruptRun {
        file: expected.clone(),
        detail: e.to_string(),
    })?;
    let digest = sha256_hex(&bytes);
    if digest != rec.artifact.digest {
        return Err(StoreError::CorruptRun {
            file: expected,
            detail: format!("digest {digest} does not match recorded {}", rec.artifact.digest),
        });
    }
    Ok(ImageArtifact {
        iteration: rec.iteration,
        content: bytes,
        media_kind: rec.artifact.media_kind,
        content_digest: digest,
        backend_metadata: rec.artifact.metadata.clone(),
    })
}

/// Memory must carry verbatim copies of the trajectory's prompts, verdicts
/// and digests.
fn check_tiering(trajectory: &Trajectory, memory: &MemoryState) -> Result<(), StoreError> {
    let corrupt = |detail: String| StoreError::CorruptRun {
        file: MEMORY_FILE.into(),
        detail,
    };
    if memory.run_id() != &trajectory.run_id {
        return Err(corrupt(format!("run_id {} differs from trajectory", memory.run_id())));
    }
    if memory.len() > trajectory.iterations.len() {
        return Err(corrupt(format!(
            "{} records for {} iterations",
            memory.len(),
            trajectory.iterations.len()
        )));
    }
    for (m, t) in memory.records().iter().zip(&trajectory.iterations) {
        if m.prompt != t.prompt || m.verdicts != t.verdicts || m.artifact_digest != t.artifact.digest {
            return Err(corrupt(format!("record {} differs from trajectory", m.iteration)));
        }
        if m.experience.as_ref().map(|e| e.text.as_str()) != t.experience.as_deref() {
            return Err(corrupt(format!("record {} experience differs from trajectory", m.iteration)));
        }
    }
    Ok(())
}

impl RunWriter {
    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn cassette_dir(&self) -> PathBuf {
        self.dir.join(CASSETTES_DIR)
    }
}

impl RunSink for RunWriter {
    fn artifact(&mut self, artifact: &ImageArtifact) -> Result<(), StoreError> {
        write_artifact(&self.dir, artifact)
    }

    fn iteration(
        &mut self,
        record: &IterationRecord,
        trajectory: &Trajectory,
        memory: &MemoryState,
    ) -> Result<(), StoreError> {
        if record.iteration <= self.persisted {
            return Err(StoreError::DuplicateIteration {
                iteration: record.iteration,
            });
        }
        if record.iteration != self.persisted + 1 {
            return Err(StoreError::IterationGap {
                expected: self.persisted + 1,
                got: record.iteration,
            });
        }
        if !self.dir.join(&record.artifact.file).is_file() {
            return Err(StoreError::MissingArtifact {
                iteration: record.iteration,
                file: record.artifact.file.clone(),
            });
        }
        write_state(&self.dir, trajectory, memory)?;
        self.persisted = record.iteration;
        Ok(())
    }

    fn checkpoint(&mut self, trajectory: &Trajectory, memory: &MemoryState) -> Result<(), StoreError> {
        write_state(&self.dir, trajectory, memory)
    }
}

/// Resolves artifacts from a run directory's `images/`.
#[derive(Debug, Clone)]
pub struct DirResolver {
    dir: PathBuf,
}

impl ArtifactResolver for DirResolver {
    fn resolve(&self, iteration: u32, digest: &str) -> Option<(Vec<u8>, MediaKind)> {
        [MediaKind::SyntheticFeatureMap, MediaKind::RasterImage]
            .into_iter()
            .find_map(|kind| {
                let bytes = fs::read(self.dir.join(ArtifactRecord::file_name(iteration, kind))).ok()?;
                (sha256_hex(&bytes) == digest).then_some((bytes, kind))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pending_write_commit_and_abandon() {
        let tmp = tempfile::tempdir().unwrap();
        let dest = tmp.path().join("f.json");
        atomic_write(&dest, b"one").unwrap();
        let pending = PendingWrite::stage(&dest, b"two").unwrap();
        let tmp_path = pending.temp_path().to_path_buf();
        pending.abandon();
        assert_eq!(fs::read(&dest).unwrap(), b"one");
        assert!(tmp_path.exists());
        let pending = PendingWrite::stage(&dest, b"three").unwrap();
        let tmp_path = pending.temp_path().to_path_buf();
        drop(pending);
        assert!(!tmp_path.exists());
        PendingWrite::stage(&dest, b"four").unwrap().commit().unwrap();
        assert_eq!(fs::read(&dest).unwrap(), b"four");
    }

    #[test]
    fn run_ids_must_be_plain_names() {
        assert!(valid_run_id("abc-123_x"));
        assert!(!valid_run_id("../etc"));
        assert!(!valid_run_id(""));
    }
}
