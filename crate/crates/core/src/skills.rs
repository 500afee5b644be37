//! Skill registry.
//!
//! One skill per subdirectory, `<root>/<slug>/SKILL.md`:
//!
//! ```text
//! ---
//! name: Text Rendering
//! description: Legible, correctly spelled text in images.
//! ---
//! <instruction body, markdown>
//! ```
//!
//! Scanning reads only the frontmatter. Bodies are read by [`SkillRegistry::resolve`]
//! and every read is counted in the load ledger.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_parts;

pub const SKILL_FILE: &str = "SKILL.md";
pub const DESCRIPTION_CHAR_CAP: usize = 500;
/// Frontmatter larger than this is treated as malformed during scans.
const FRONTMATTER_BYTE_LIMIT: u64 = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillHeader {
    pub name: String,
    pub description: String,
}

impl SkillHeader {
    /// Bytes this header contributes to the manifest.
    pub fn exposed_bytes(&self) -> u64 {
        (self.name.len() + self.description.len()) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skill {
    pub header: SkillHeader,
    pub instructions: String,
    pub source_path: PathBuf,
    pub body_bytes: u64,
}

/// Headers only. No instruction body is reachable from a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillManifest {
    pub headers: Vec<SkillHeader>,
    pub registry_digest: String,
}

impl SkillManifest {
    pub fn is_empty(&self) -> bool {
        self.headers.is_empty()
    }

    pub fn byte_size(&self) -> u64 {
        self.headers.iter().map(SkillHeader::exposed_bytes).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LedgerSnapshot {
    pub header_bytes_exposed: u64,
    pub body_bytes_exposed: u64,
    pub body_loads: u64,
}

#[derive(Debug, Default)]
struct LoadLedger {
    header_bytes_exposed: AtomicU64,
    body_bytes_exposed: AtomicU64,
    body_loads: AtomicU64,
}

impl LoadLedger {
    fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            header_bytes_exposed: self.header_bytes_exposed.load(Ordering::Relaxed),
            body_bytes_exposed: self.body_bytes_exposed.load(Ordering::Relaxed),
            body_loads: self.body_loads.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug)]
struct Entry {
    header: SkillHeader,
    path: PathBuf,
    ledger: LoadLedger,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Diagnostic {
    #[error("duplicate skill name `{name}` in {paths:?}; all copies excluded")]
    DuplicateSkillName { name: String, paths: Vec<PathBuf> },
    #[error("{}: malformed frontmatter: {reason}", path.display())]
    MalformedFrontmatter { path: PathBuf, reason: String },
    #[error("{}: {reason}", path.display())]
    InvalidSkill { path: PathBuf, reason: String },
}

#[derive(Debug, Error)]
pub enum SkillError {
    #[error("skill root {} is not a directory", .0.display())]
    RootNotFound(PathBuf),
    #[error("cannot list {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown skill `{0}`")]
    UnknownSkill(String),
    #[error("cannot read body of `{name}` from {}: {reason}", path.display())]
    BodyReadFailure {
        name: String,
        path: PathBuf,
        reason: String,
    },
}

/// Immutable after [`scan`]; safe to share across runs.
#[derive(Debug)]
pub struct SkillRegistry {
    root_dir: PathBuf,
    manifest: SkillManifest,
    entries: Vec<Entry>,
    diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Frontmatter {
    fields: BTreeMap<String, String>,
    /// Bytes up to and including the closing delimiter line.
    header_len: usize,
}

/// Parses frontmatter from a line source, stopping at the closing `---`.
fn read_frontmatter<R: BufRead>(mut reader: R, limit: Option<u64>) -> Result<Frontmatter, String> {
    let mut consumed = 0usize;
    let mut line = String::new();
    let mut first = true;
    let mut fields = BTreeMap::new();
    loop {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| format!("read error: {e}"))?;
        if n == 0 {
            return Err(if first {
                "file is empty".into()
            } else {
                "missing closing `---`".into()
            });
        }
        consumed += n;
        if limit.is_some_and(|l| consumed as u64 > l) {
            return Err("frontmatter exceeds size limit".into());
        }
        let text = line.trim_end_matches(['\n', '\r']);
        if first {
            if text.trim_start_matches('\u{feff}') != "---" {
                return Err("first line must be `---`".into());
            }
            first = false;
            continue;
        }
        if text == "---" {
            return Ok(Frontmatter {
                fields,
                header_len: consumed,
            });
        }
        if text.trim().is_empty() || text.trim_start().starts_with('#') {
            continue;
        }
        let Some((key, value)) = text.split_once(':') else {
            return Err(format!("line `{text}` is not `key: value`"));
        };
        let key = key.trim().to_ascii_lowercase();
        if key.is_empty() {
            return Err(format!("line `{text}` has an empty key"));
        }
        fields.insert(key, unquote(value.trim()).to_string());
    }
}

fn unquote(v: &str) -> &str {
    for q in ['"', '\''] {
        if v.len() >= 2 && v.starts_with(q) && v.ends_with(q) {
            return &v[1..v.len() - 1];
        }
    }
    v
}

fn header_from_fields(fields: &BTreeMap<String, String>) -> Result<SkillHeader, String> {
    let name = fields
        .get("name")
        .map(|s| s.trim().to_string())
        .ok_or("missing required key: name")?;
    let description = fields
        .get("description")
        .map(|s| s.trim().to_string())
        .ok_or("missing required key: description")?;
    if name.is_empty() {
        return Err("empty name".into());
    }
    if description.is_empty() {
        return Err("empty description".into());
    }
    if description.chars().count() > DESCRIPTION_CHAR_CAP {
        return Err(format!(
            "description exceeds cap ({} > {DESCRIPTION_CHAR_CAP} chars)",
            description.chars().count()
        ));
    }
    Ok(SkillHeader { name, description })
}

fn skill_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(SKILL_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Builds a registry from `<root>/<slug>/SKILL.md` files. Bodies are not read.
pub fn scan(root_dir: &Path) -> Result<SkillRegistry, SkillError> {
    if !root_dir.is_dir() {
        return Err(SkillError::RootNotFound(root_dir.to_path_buf()));
    }
    let io_err = |source| SkillError::Io {
        path: root_dir.to_path_buf(),
        source,
    };
    let mut dirs: Vec<PathBuf> = fs::read_dir(root_dir)
        .map_err(io_err)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();

    let mut diagnostics = Vec::new();
    // (header, path, slug, frontmatter bytes, file length)
    let mut found: Vec<(SkillHeader, PathBuf, String, Vec<u8>, u64)> = Vec::new();
    for dir in dirs {
        let path = dir.join(SKILL_FILE);
        if !path.is_file() {
            continue;
        }
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) => {
                diagnostics.push(Diagnostic::MalformedFrontmatter {
                    path,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let file_len = file.metadata().map(|m| m.len()).unwrap_or(0);
        let mut reader = BufReader::new(file);
        let fm = match read_frontmatter(&mut reader, Some(FRONTMATTER_BYTE_LIMIT)) {
            Ok(fm) => fm,
            Err(reason) => {
                diagnostics.push(Diagnostic::MalformedFrontmatter { path, reason });
                continue;
            }
        };
        let header = match header_from_fields(&fm.fields) {
            Ok(h) => h,
            Err(reason) => {
                diagnostics.push(Diagnostic::MalformedFrontmatter { path, reason });
                continue;
            }
        };
        if file_len <= fm.header_len as u64 {
            diagnostics.push(Diagnostic::InvalidSkill {
                path,
                reason: "empty body".into(),
            });
            continue;
        }
        let fm_bytes = fm
            .fields
            .iter()
            .flat_map(|(k, v)| [k.as_bytes(), b"\0", v.as_bytes(), b"\0"].concat())
            .collect();
        let slug = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        found.push((header, path, slug, fm_bytes, file_len));
    }

    let mut by_key: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, (h, ..)) in found.iter().enumerate() {
        by_key.entry(h.name.to_lowercase()).or_default().push(i);
    }
    let mut keep = vec![true; found.len()];
    for idxs in by_key.values().filter(|v| v.len() > 1) {
        for &i in idxs {
            keep[i] = false;
        }
        let diag = Diagnostic::DuplicateSkillName {
            name: found[idxs[0]].0.name.clone(),
            paths: idxs.iter().map(|&i| found[i].1.clone()).collect(),
        };
        tracing::error!("{diag}");
        diagnostics.push(diag);
    }

    let mut kept: Vec<_> = found
        .into_iter()
        .zip(keep)
        .filter_map(|(f, k)| k.then_some(f))
        .collect();
    kept.sort_by(|a, b| a.0.name.cmp(&b.0.name));

    let len_bytes: Vec<[u8; 8]> = kept.iter().map(|k| k.4.to_le_bytes()).collect();
    let mut parts: Vec<&[u8]> = Vec::new();
    for (k, len) in kept.iter().zip(&len_bytes) {
        parts.push(k.2.as_bytes());
        parts.push(&k.3);
        parts.push(len);
    }
    let registry_digest = hex::encode(sha256_parts(parts));

    for d in &diagnostics {
        tracing::warn!("skill scan: {d}");
    }
    let manifest = SkillManifest {
        headers: kept.iter().map(|k| k.0.clone()).collect(),
        registry_digest,
    };
    let entries = kept
        .into_iter()
        .map(|(header, path, ..)| Entry {
            header,
            path,
            ledger: LoadLedger::default(),
        })
        .collect();
    Ok(SkillRegistry {
        root_dir: root_dir.to_path_buf(),
        manifest,
        entries,
        diagnostics,
    })
}

impl SkillRegistry {
    /// A registry with no skills.
    pub fn empty() -> Self {
        Self {
            root_dir: PathBuf::new(),
            manifest: SkillManifest {
                headers: Vec::new(),
                registry_digest: hex::encode(sha256_parts(std::iter::empty::<&[u8]>())),
            },
            entries: Vec::new(),
            diagnostics: Vec::new(),
        }
    }

    pub fn root_dir(&self) -> &Path {
        &self.root_dir
    }

    /// The manifest, without recording an exposure.
    pub fn manifest(&self) -> &SkillManifest {
        &self.manifest
    }

    /// The manifest as handed to the planner; counts header bytes per skill.
    pub fn expose_manifest(&self) -> SkillManifest {
        for e in &self.entries {
            e.ledger
                .header_bytes_exposed
                .fetch_add(e.header.exposed_bytes(), Ordering::Relaxed);
        }
        self.manifest.clone()
    }

    pub fn diagnostics(&self) -> &[Diagnostic] {
        &self.diagnostics
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn entry(&self, name: &str) -> Option<&Entry> {
        let key = name.to_lowercase();
        self.entries.iter().find(|e| e.header.name.to_lowercase() == key)
    }

    /// Canonical spelling of `name`, when present (case-insensitive).
    pub fn canonical_name(&self, name: &str) -> Option<&str> {
        self.entry(name.trim()).map(|e| e.header.name.as_str())
    }

    pub fn ledger(&self, name: &str) -> Option<LedgerSnapshot> {
        self.entry(name).map(|e| e.ledger.snapshot())
    }

    pub fn ledger_all(&self) -> Vec<(String, LedgerSnapshot)> {
        self.entries
            .iter()
            .map(|e| (e.header.name.clone(), e.ledger.snapshot()))
            .collect()
    }

    /// Reads the full instruction body of `name`.
    pub fn resolve(&self, name: &str) -> Result<Skill, SkillError> {
        let entry = self
            .entry(name)
            .ok_or_else(|| SkillError::UnknownSkill(name.to_string()))?;
        let fail = |reason: String| SkillError::BodyReadFailure {
            name: entry.header.name.clone(),
            path: entry.path.clone(),
            reason,
        };
        let bytes = fs::read(&entry.path).map_err(|e| fail(e.to_string()))?;
        let fm = read_frontmatter(bytes.as_slice(), None).map_err(fail)?;
        let body = std::str::from_utf8(&bytes[fm.header_len..])
            .map_err(|e| fail(format!("body is not UTF-8: {e}")))?;
        if body.trim().is_empty() {
            return Err(fail("empty body".into()));
        }
        let header = header_from_fields(&fm.fields).map_err(fail)?;
        if header != entry.header {
            return Err(fail("frontmatter changed since scan".into()));
        }
        let body_bytes = body.len() as u64;
        entry.ledger.body_loads.fetch_add(1, Ordering::Relaxed);
        entry
            .ledger
            .body_bytes_exposed
            .fetch_add(body_bytes, Ordering::Relaxed);
        Ok(Skill {
            header,
            instructions: body.to_string(),
            source_path: entry.path.clone(),
            body_bytes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub path: PathBuf,
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks one skill file (or its directory) against the authoring rules.
/// With a registry, also reports name collisions against it.
pub fn validate(skill_path: &Path, registry: Option<&SkillRegistry>) -> ValidationReport {
    let path = skill_file(skill_path);
    let mut violations = Vec::new();
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) => {
            violations.push(format!("cannot read file: {e}"));
            return ValidationReport { path, violations };
        }
    };
    if std::str::from_utf8(&bytes).is_err() {
        violations.push("file is not valid UTF-8".into());
        return ValidationReport { path, violations };
    }
    let fm = match read_frontmatter(bytes.as_slice(), None) {
        Ok(fm) => fm,
        Err(reason) => {
            violations.push(format!("malformed frontmatter: {reason}"));
            return ValidationReport { path, violations };
        }
    };
    let name = fm.fields.get("name").map(|s| s.trim());
    let description = fm.fields.get("description").map(|s| s.trim());
    match name {
        None => violations.push("missing required key: name".into()),
        Some("") => violations.push("empty name".into()),
        Some(_) => {}
    }
    match description {
        None => violations.push("missing required key: description".into()),
        Some("") => violations.push("empty description".into()),
        Some(d) if d.chars().count() > DESCRIPTION_CHAR_CAP => violations.push(format!(
            "description exceeds cap ({} > {DESCRIPTION_CHAR_CAP} chars)",
            d.chars().count()
        )),
        Some(_) => {}
    }
    if bytes[fm.header_len..].iter().all(u8::is_ascii_whitespace) {
        violations.push("empty body".into());
    }
    if let (Some(reg), Some(n)) = (registry, name.filter(|n| !n.is_empty())) {
        let own = fs::canonicalize(&path).ok();
        let clash = reg.entries.iter().find(|e| {
            e.header.name.to_lowercase() == n.to_lowercase()
                && fs::canonicalize(&e.path).ok() != own
        });
        if let Some(e) = clash {
            violations.push(format!(
                "name collision: `{n}` already defined by {}",
                e.path.display()
            ));
        }
        for d in &reg.diagnostics {
            if let Diagnostic::DuplicateSkillName { name: dup, .. } = d {
                if dup.to_lowercase() == n.to_lowercase() {
                    violations.push(format!("name collision: `{n}` is defined more than once"));
                }
            }
        }
    }
    ValidationReport { path, violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_skill(root: &Path, slug: &str, name: &str, desc: &str, body: &str) {
        let dir = root.join(slug);
        fs::create_dir_all(&dir).unwrap();
        fs::write(
            dir.join(SKILL_FILE),
            format!("---\nname: {name}\ndescription: {desc}\n---\n{body}"),
        )
        .unwrap();
    }

    #[test]
    fn scan_reads_headers_only() {
        let tmp = tempfile::tempdir().unwrap();
        write_skill(tmp.path(), "b", "Beta", "second", "beta body\n");
        write_skill(tmp.path(), "a", "Alpha", "first", "alpha body\n");
        let reg = scan(tmp.path()).unwrap();
        let names: Vec<_> = reg.manifest().headers.iter().map(|h| h.name.as_str()).collect();
        assert_eq!(names, ["Alpha", "Beta"]);
        for (_, l) in reg.ledger_all() {
            assert_eq!(l, LedgerSnapshot::default());
        }
        let skill = reg.resolve("alpha").unwrap();
        assert_eq!(skill.instructions, "alpha body\n");
        assert_eq!(reg.ledger("Alpha").unwrap().body_loads, 1);
        assert_eq!(reg.ledger("Alpha").unwrap().body_bytes_exposed, 11);
        assert_eq!(reg.ledger("Beta").unwrap().body_bytes_exposed, 0);
        let again = reg.resolve("Alpha").unwrap();
        assert_eq!(again, skill);
        assert_eq!(reg.ledger("Alpha").unwrap().body_loads, 2);
    }

    #[test]
    fn duplicates_are_all_excluded() {
        let tmp = tempfile::tempdir().unwrap();
        write_skill(tmp.path(), "one", "draw", "x", "b\n");
        write_skill(tmp.path(), "two", "Draw", "y", "b\n");
        write_skill(tmp.path(), "three", "paint", "z", "b\n");
        let reg = scan(tmp.path()).unwrap();
        assert_eq!(reg.len(), 1);
        assert!(reg
            .diagnostics()
            .iter()
            .any(|d| matches!(d, Diagnostic::DuplicateSkillName { paths, .. } if paths.len() == 2)));
    }

    #[test]
    fn malformed_is_skipped() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("bad")).unwrap();
        fs::write(tmp.path().join("bad").join(SKILL_FILE), "name: x\n").unwrap();
        write_skill(tmp.path(), "nodesc", "NoDesc", "", "body\n");
        let reg = scan(tmp.path()).unwrap();
        assert!(reg.is_empty());
        assert_eq!(reg.diagnostics().len(), 2);
    }

    #[test]
    fn unknown_and_vanished() {
        let tmp = tempfile::tempdir().unwrap();
        write_skill(tmp.path(), "a", "Alpha", "first", "alpha body\n");
        let reg = scan(tmp.path()).unwrap();
        assert!(matches!(reg.resolve("Gamma"), Err(SkillError::UnknownSkill(_))));
        fs::remove_file(tmp.path().join("a").join(SKILL_FILE)).unwrap();
        assert!(matches!(reg.resolve("Alpha"), Err(SkillError::BodyReadFailure { .. })));
    }

    #[test]
    fn validation_messages() {
        let tmp = tempfile::tempdir().unwrap();
        write_skill(tmp.path(), "ok", "Fine", "does things", "body\n");
        assert!(validate(&tmp.path().join("ok"), None).is_valid());

        let dir = tmp.path().join("nodesc");
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join(SKILL_FILE), "---\nname: X\n---\nbody\n").unwrap();
        assert_eq!(
            validate(&dir, None).violations,
            vec!["missing required key: description".to_string()]
        );

        write_skill(tmp.path(), "long", "Long", &"d".repeat(10 * 1024), "body\n");
        let r = validate(&tmp.path().join("long"), None);
        assert!(r.violations[0].starts_with("description exceeds cap"), "{r:?}");

        write_skill(tmp.path(), "empty", "Empty", "d", "\n  \n");
        assert_eq!(validate(&tmp.path().join("empty"), None).violations, vec!["empty body".to_string()]);

        let reg = scan(tmp.path()).unwrap();
        let other = tempfile::tempdir().unwrap();
        write_skill(other.path(), "dup", "fine", "again", "body\n");
        let r = validate(&other.path().join("dup"), Some(&reg));
        assert!(r.violations[0].starts_with("name collision"), "{r:?}");
    }

    #[test]
    fn digest_is_stable() {
        let tmp = tempfile::tempdir().unwrap();
        write_skill(tmp.path(), "a", "Alpha", "first", "alpha body\n");
        let a = scan(tmp.path()).unwrap().manifest().registry_digest.clone();
        let b = scan(tmp.path()).unwrap().manifest().registry_digest.clone();
        assert_eq!(a, b);
        write_skill(tmp.path(), "a", "Alpha", "changed", "alpha body\n");
        assert_ne!(scan(tmp.path()).unwrap().manifest().registry_digest, a);
    }
}
