//! Run directories, checksummed artifacts and the reproducibility manifest.
//!
//! Every artifact is written once (temp file + no-clobber rename) and
//! recorded with its SHA-256. The manifest is the only file rewritten in
//! place, and it is serialized canonically so identical runs produce
//! identical bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendIdentities, ExecutionPolicy};
use crate::geometry::FrameSize;
use crate::pipeline::{GateDecision, RunConfig, Stage, StageStatus};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: &str = "lsid.manifest.v1";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{kind} already persisted for run {run_id} (revision {revision})")]
    Duplicate {
        run_id: String,
        kind: ArtifactKind,
        revision: u32,
    },
    #[error("invalid run id '{0}'")]
    InvalidRunId(String),
    #[error("run {0} does not exist")]
    UnknownRun(String),
    #[error("no manifest at {0}")]
    MissingManifest(PathBuf),
    #[error("manifest field `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("artifact path '{0}' is not run-relative")]
    UnsafePath(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = ArtifactError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArtifactError + '_ {
    move |source| ArtifactError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Detections,
    Annotated,
    Mask,
    Overlay,
    Edited,
    Composite,
    Description,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 7] = [
        Self::Detections,
        Self::Annotated,
        Self::Mask,
        Self::Overlay,
        Self::Edited,
        Self::Composite,
        Self::Description,
    ];

    pub fn stem(self) -> &'static str {
        match self {
            Self::Detections => "detections",
            Self::Annotated => "annotated",
            Self::Mask => "mask",
            Self::Overlay => "overlay",
            Self::Edited => "edited",
            Self::Composite => "composite",
            Self::Description => "description",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Detections => "json",
            Self::Description => "txt",
            _ => "png",
        }
    }

    pub fn content_type(self) -> &'static str {
        match self {
            Self::Detections => "application/json",
            Self::Description => "text/plain; charset=utf-8",
            _ => "image/png",
        }
    }

    /// Canonical filename; revisions after the first get an `.rN` suffix.
    pub fn filename(self, revision: u32) -> String {
        if revision == 0 {
            format!("{}.{}", self.stem(), self.extension())
        } else {
            format!("{}.r{}.{}", self.stem(), revision, self.extension())
        }
    }

    pub fn stage(self) -> Stage {
        match self {
            Self::Detections | Self::Annotated => Stage::Detect,
            Self::Mask | Self::Overlay => Stage::Segment,
            Self::Edited | Self::Composite => Stage::Inpaint,
            Self::Description => Stage::Describe,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.stem() == s)
    }
}

impl fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.stem())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub kind: ArtifactKind,
    pub revision: u32,
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// Revision of the latest attempt's artifacts.
    pub revision: u32,
    pub seconds: Option<f64>,
    pub message: Option<String>,
    pub gate: Option<GateDecision>,
}

impl StageRecord {
    pub fn pending(stage: Stage) -> Self {
        Self {
            stage,
            status: StageStatus::Pending,
            revision: 0,
            seconds: None,
            message: None,
            gate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateEvent {
    pub stage: Stage,
    pub revision: u32,
    pub decision: GateDecision,
    pub at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub original: FrameSize,
    pub working: FrameSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub run_id: String,
    pub created_at: String,
    pub finalized_at: Option<String>,
    pub phrase: String,
    pub edit_prompt: String,
    pub config: RunConfig,
    pub seed: u64,
    pub backends: BackendIdentities,
    pub execution: ExecutionPolicy,
    pub notices: Vec<String>,
    pub frames: FrameRecord,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<ArtifactEntry>,
    pub retained_detections: Option<usize>,
    pub signal: Option<String>,
    /// Share of edit-prompt tokens found in the description (advisory).
    pub semantic_overlap: Option<f64>,
    pub gates: Vec<GateEvent>,
    pub environment: BTreeMap<String, String>,
    pub content_fingerprint: String,
}

impl RunManifest {
    pub fn is_finalized(&self) -> bool {
        self.finalized_at.is_some()
    }

    pub fn stage(&self, stage: Stage) -> &StageRecord {
        &self.stages[stage.index()]
    }

    /// Latest entry of `kind` at `revision`.
    pub fn entry(&self, kind: ArtifactKind, revision: u32) -> Option<&ArtifactEntry> {
        self.artifacts
            .iter()
            .rev()
            .find(|e| e.kind == kind && e.revision == revision)
    }

    /// Most recent entry of `kind`, any revision.
    pub fn latest(&self, kind: ArtifactKind) -> Option<&ArtifactEntry> {
        self.artifacts.iter().filter(|e| e.kind == kind).max_by_key(|e| e.revision)
    }

    pub fn refresh_fingerprint(&mut self) {
        self.content_fingerprint = content_fingerprint(&self.config, &self.artifacts);
    }

    /// Canonical bytes: sorted keys, two-space indentation, trailing newline.
    pub fn to_canonical_bytes(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("manifest serializes");
        let mut out = serde_json::to_vec_pretty(&value).expect("value serializes");
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        serde_path_to_error::deserialize(de).map_err(|err| ArtifactError::Parse {
            path: err.path().to_string(),
            message: err.inner().to_string(),
        })
    }
}

/// Digest over the configuration and every artifact checksum. Excludes run
/// ids, timestamps and timings, so it identifies replayable content.
pub fn content_fingerprint(config: &RunConfig, artifacts: &[ArtifactEntry]) -> String {
    #[derive(Serialize)]
    struct Basis<'a> {
        config: &'a RunConfig,
        artifacts: Vec<(ArtifactKind, u32, &'a str)>,
    }
    let mut entries: Vec<(ArtifactKind, u32, &str)> = artifacts
        .iter()
        .map(|e| (e.kind, e.revision, e.sha256.as_str()))
        .collect();
    entries.sort();
    let basis = serde_json::to_value(Basis {
        config,
        artifacts: entries,
    })
    .expect("fingerprint basis serializes");
    sha256_hex(&serde_json::to_vec(&basis).expect("value serializes"))
}

/// Filesystem layout: `<root>/<run_id>/<artifact files>`.
#[derive(Debug, Clone)]
pub struct ArtifactStore {
    root: PathBuf,
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl ArtifactStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf> {
        if !valid_run_id(run_id) {
            return Err(ArtifactError::InvalidRunId(run_id.to_string()));
        }
        Ok(self.root.join(run_id))
    }

    pub fn create_run(&self, run_id: &str) -> Result<PathBuf> {
        let dir = self.run_dir(run_id)?;
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(dir)
    }

    pub fn run_exists(&self, run_id: &str) -> bool {
        self.run_dir(run_id).map(|d| d.is_dir()).unwrap_or(false)
    }

    pub fn persist(&self, run_id: &str, kind: ArtifactKind, payload: &[u8]) -> Result<ArtifactEntry> {
        self.persist_revision(run_id, kind, 0, payload)
    }

    /// Write an artifact once. A second write of the same kind and revision
    /// is refused.
    pub fn persist_revision(
        &self,
        run_id: &str,
        kind: ArtifactKind,
        revision: u32,
        payload: &[u8],
    ) -> Result<ArtifactEntry> {
        let dir = self.run_dir(run_id)?;
        if !dir.is_dir() {
            return Err(ArtifactError::UnknownRun(run_id.to_string()));
        }
        let name = kind.filename(revision);
        let target = dir.join(&name);
        if target.exists() {
            return Err(ArtifactError::Duplicate {
                run_id: run_id.to_string(),
                kind,
                revision,
            });
        }
        let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(&dir))?;
        tmp.write_all(payload).map_err(io_err(&target))?;
        tmp.as_file().sync_all().map_err(io_err(&target))?;
        tmp.persist_noclobber(&target).map_err(|e| {
            if e.error.kind() == std::io::ErrorKind::AlreadyExists {
                ArtifactError::Duplicate {
                    run_id: run_id.to_string(),
                    kind,
                    revision,
                }
            } else {
                ArtifactError::Io {
                    path: target.clone(),
                    source: e.error,
                }
            }
        })?;
        Ok(ArtifactEntry {
            kind,
            revision,
            path: name,
            sha256: sha256_hex(payload),
            bytes: payload.len() as u64,
        })
    }

    /// Read a run-relative file. Paths that climb out of the run directory
    /// are refused.
    pub fn read(&self, run_id: &str, relative: &str) -> Result<Vec<u8>> {
        let path = self.resolve(run_id, relative)?;
        std::fs::read(&path).map_err(io_err(&path))
    }

    fn resolve(&self, run_id: &str, relative: &str) -> Result<PathBuf> {
        let rel = Path::new(relative);
        let safe = !relative.is_empty()
            && rel
                .components()
                .all(|c| matches!(c, std::path::Component::Normal(_)));
        if !safe {
            return Err(ArtifactError::UnsafePath(relative.to_string()));
        }
        Ok(self.run_dir(run_id)?.join(rel))
    }

    pub fn manifest_path(&self, run_id: &str) -> Result<PathBuf> {
        Ok(self.run_dir(run_id)?.join(MANIFEST_FILE))
    }

    /// Atomically replace the run's manifest.
    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<PathBuf> {
        let dir = self.run_dir(&manifest.run_id)?;
        if !dir.is_dir() {
            return Err(ArtifactError::UnknownRun(manifest.run_id.clone()));
        }
        let path = dir.join(MANIFEST_FILE);
        let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(&dir))?;
        tmp.write_all(&manifest.to_canonical_bytes()).map_err(io_err(&path))?;
        tmp.as_file().sync_all().map_err(io_err(&path))?;
        tmp.persist(&path).map_err(|e| ArtifactError::Io {
            path: path.clone(),
            source: e.error,
        })?;
        Ok(path)
    }

    pub fn load_run_manifest(&self, run_id: &str) -> Result<RunManifest> {
        load_manifest(&self.manifest_path(run_id)?)
    }

    pub fn verify_run(&self, run_id: &str) -> Result<VerifyReport> {
        let manifest_path = self.manifest_path(run_id)?;
        if !manifest_path.is_file() {
            return Err(ArtifactError::MissingManifest(manifest_path));
        }
        let manifest = load_manifest(&manifest_path)?;
        let mut checks = Vec::with_capacity(manifest.artifacts.len());
        for entry in &manifest.artifacts {
            let check = match self.resolve(run_id, &entry.path) {
                Err(_) => ArtifactCheck {
                    kind: entry.kind,
                    revision: entry.revision,
                    path: entry.path.clone(),
                    state: CheckState::UnsafePath,
                },
                Ok(path) => {
                    let state = match std::fs::read(&path) {
                        Err(_) => CheckState::Missing,
                        Ok(bytes) if sha256_hex(&bytes) != entry.sha256 || bytes.len() as u64 != entry.bytes => {
                            CheckState::ChecksumMismatch
                        }
                        Ok(_) => CheckState::Ok,
                    };
                    ArtifactCheck {
                        kind: entry.kind,
                        revision: entry.revision,
                        path: entry.path.clone(),
                        state,
                    }
                }
            };
            checks.push(check);
        }

        let mut incomplete = Vec::new();
        for record in &manifest.stages {
            if record.status != StageStatus::Succeeded {
                continue;
            }
            for kind in record.stage.artifact_kinds() {
                let present = checks
                    .iter()
                    .any(|c| c.kind == *kind && c.revision == record.revision && c.state == CheckState::Ok);
                if !present {
                    incomplete.push(MissingKind {
                        stage: record.stage,
                        kind: *kind,
                        revision: record.revision,
                    });
                }
            }
        }
        let fingerprint_ok = manifest.content_fingerprint == content_fingerprint(&manifest.config, &manifest.artifacts);
        let passed = fingerprint_ok && incomplete.is_empty() && checks.iter().all(|c| c.state == CheckState::Ok);
        Ok(VerifyReport {
            run_id: run_id.to_string(),
            checks,
            incomplete,
            fingerprint_ok,
            passed,
        })
    }
}

pub fn write_manifest(store: &ArtifactStore, manifest: &RunManifest) -> Result<PathBuf> {
    store.write_manifest(manifest)
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    if !path.is_file() {
        return Err(ArtifactError::MissingManifest(path.to_path_buf()));
    }
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    RunManifest::from_bytes(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckState {
    Ok,
    Missing,
    ChecksumMismatch,
    UnsafePath,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ArtifactCheck {
    pub kind: ArtifactKind,
    pub revision: u32,
    pub path: String,
    pub state: CheckState,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MissingKind {
    pub stage: Stage,
    pub kind: ArtifactKind,
    pub revision: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub run_id: String,
    pub checks: Vec<ArtifactCheck>,
    pub incomplete: Vec<MissingKind>,
    pub fingerprint_ok: bool,
    pub passed: bool,
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "run {}", self.run_id)?;
        for c in &self.checks {
            let state = match c.state {
                CheckState::Ok => "ok",
                CheckState::Missing => "MISSING",
                CheckState::ChecksumMismatch => "CHECKSUM MISMATCH",
                CheckState::UnsafePath => "UNSAFE PATH",
            };
            writeln!(f, "  {:<22} {}", c.path, state)?;
        }
        for m in &self.incomplete {
            writeln!(f, "  incomplete: stage {} lacks {} (revision {})", m.stage, m.kind, m.revision)?;
        }
        if !self.fingerprint_ok {
            writeln!(f, "  content fingerprint does not match manifest contents")?;
        }
        write!(f, "{}", if self.passed { "PASS" } else { "FAIL" })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::BackendSet;

    fn manifest(run_id: &str) -> RunManifest {
        let config = RunConfig::default();
        RunManifest {
            schema: MANIFEST_SCHEMA.into(),
            run_id: run_id.into(),
            created_at: "2026-01-01T00:00:00Z".into(),
            finalized_at: None,
            phrase: "red".into(),
            edit_prompt: "blue".into(),
            seed: config.seed,
            config,
            backends: BackendSet::mock().identities(),
            execution: ExecutionPolicy::CPU,
            notices: vec![],
            frames: FrameRecord {
                original: FrameSize::new(64, 64).unwrap(),
                working: FrameSize::new(512, 512).unwrap(),
            },
            stages: Stage::ALL.iter().map(|s| StageRecord::pending(*s)).collect(),
            artifacts: vec![],
            retained_detections: None,
            signal: None,
            semantic_overlap: None,
            gates: vec![],
            environment: BTreeMap::new(),
            content_fingerprint: String::new(),
        }
    }

    #[test]
    fn filenames_and_revisions() {
        assert_eq!(ArtifactKind::Mask.filename(0), "mask.png");
        assert_eq!(ArtifactKind::Mask.filename(1), "mask.r1.png");
        assert_eq!(ArtifactKind::Detections.filename(2), "detections.r2.json");
        assert_eq!(ArtifactKind::Description.filename(0), "description.txt");
        assert_eq!(ArtifactKind::parse("overlay"), Some(ArtifactKind::Overlay));
    }

    #[test]
    fn persist_round_trip_and_no_overwrite() {
        let tmp = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(tmp.path()).unwrap();
        store.create_run("r1").unwrap();
        let entry = store.persist("r1", ArtifactKind::Description, b"hello\n").unwrap();
        assert_eq!(entry.path, "description.txt");
        assert_eq!(entry.bytes, 6);
        assert_eq!(store.read("r1", &entry.path).unwrap(), b"hello\n");
        assert!(matches!(
            store.persist("r1", ArtifactKind::Description, b"again"),
            Err(ArtifactError::Duplicate { .. })
        ));
        let r1 = store.persist_revision("r1", ArtifactKind::Description, 1, b"again").unwrap();
        assert_eq!(r1.path, "description.r1.txt");
        // no stray temp files left behind
        let names: Vec<_> = std::fs::read_dir(store.run_dir("r1").unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names.len(), 2, "{names:?}");
    }

    #[test]
    fn persist_requires_existing_run_and_safe_ids() {
        let tmp = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(tmp.path()).unwrap();
        assert!(matches!(
            store.persist("nope", ArtifactKind::Mask, b""),
            Err(ArtifactError::UnknownRun(_))
        ));
        assert!(matches!(store.create_run("../x"), Err(ArtifactError::InvalidRunId(_))));
        store.create_run("ok").unwrap();
        assert!(matches!(store.read("ok", "../ok/x"), Err(ArtifactError::UnsafePath(_))));
        assert!(matches!(store.read("ok", "/etc/passwd"), Err(ArtifactError::UnsafePath(_))));
    }

    #[test]
    fn manifest_write_load_write_is_byte_stable() {
        let tmp = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(tmp.path()).unwrap();
        store.create_run("m").unwrap();
        let mut m = manifest("m");
        m.artifacts.push(store.persist("m", ArtifactKind::Description, b"x").unwrap());
        m.refresh_fingerprint();
        let path = store.write_manifest(&m).unwrap();
        let first = std::fs::read(&path).unwrap();
        assert_eq!(*first.last().unwrap(), b'\n');
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded, m);
        store.write_manifest(&loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn manifest_keys_are_sorted() {
        let bytes = manifest("k").to_canonical_bytes();
        let text = String::from_utf8(bytes).unwrap();
        let top: Vec<&str> = text
            .lines()
            .filter(|l| l.starts_with("  \"") && !l.starts_with("    "))
            .map(|l| l.trim_start().split('"').nth(1).unwrap())
            .collect();
        let mut sorted = top.clone();
        sorted.sort();
        assert_eq!(top, sorted);
    }

    #[test]
    fn missing_field_is_named() {
        let mut value = serde_json::to_value(manifest("x")).unwrap();
        value.as_object_mut().unwrap().remove("seed");
        let err = RunManifest::from_bytes(&serde_json::to_vec(&value).unwrap()).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");

        let mut value = serde_json::to_value(manifest("x")).unwrap();
        value["config"]["tau_det"] = serde_json::json!("high");
        let err = RunManifest::from_bytes(&serde_json::to_vec(&value).unwrap()).unwrap_err();
        assert!(err.to_string().contains("config.tau_det"), "{err}");
    }

    #[test]
    fn verify_detects_tamper_and_missing() {
        let tmp = tempfile::tempdir().unwrap();
        let store = ArtifactStore::open(tmp.path()).unwrap();
        store.create_run("v").unwrap();
        let mut m = manifest("v");
        m.artifacts.push(store.persist("v", ArtifactKind::Description, b"blue\n").unwrap());
        m.stages[Stage::Describe.index()].status = StageStatus::Succeeded;
        m.refresh_fingerprint();
        store.write_manifest(&m).unwrap();
        assert!(store.verify_run("v").unwrap().passed);

        let path = store.run_dir("v").unwrap().join("description.txt");
        std::fs::write(&path, b"blve\n").unwrap();
        let report = store.verify_run("v").unwrap();
        assert!(!report.passed);
        assert_eq!(report.checks[0].state, CheckState::ChecksumMismatch);

        std::fs::remove_file(&path).unwrap();
        let report = store.verify_run("v").unwrap();
        assert_eq!(report.checks[0].state, CheckState::Missing);
        assert_eq!(report.incomplete.len(), 1);

        assert!(matches!(store.verify_run("absent"), Err(ArtifactError::MissingManifest(_))));
    }

    #[test]
    fn fingerprint_ignores_order_and_ids() {
        let a = ArtifactEntry {
            kind: ArtifactKind::Mask,
            revision: 0,
            path: "mask.png".into(),
            sha256: "aa".into(),
            bytes: 1,
        };
        let b = ArtifactEntry {
            kind: ArtifactKind::Edited,
            revision: 0,
            path: "edited.png".into(),
            sha256: "bb".into(),
            bytes: 1,
        };
        let cfg = RunConfig::default();
        assert_eq!(
            content_fingerprint(&cfg, &[a.clone(), b.clone()]),
            content_fingerprint(&cfg, &[b.clone(), a.clone()])
        );
        let other = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_ne!(content_fingerprint(&cfg, &[a.clone()]), content_fingerprint(&other, &[a]));
    }
}
