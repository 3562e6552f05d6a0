//! Directory-per-session persistence under a data root.
//!
//! ```text
//! <root>/sessions/<id>/session.json        upload metadata
//! <root>/sessions/<id>/state.json          JobRecord, replaced by atomic rename
//! <root>/sessions/<id>/<artifact>.json     canonical-serialized stage outputs
//! <root>/sessions/<id>/audit.jsonl         append-only transitions and overrides
//! <root>/sessions/<id>/overrides.jsonl     append-only expert overrides
//! <root>/rubrics/<SCALE>.json
//! <root>/idempotency/<sha256(key)>.json
//! <root>/queue/<id>                        sessions with pending work
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use i2e_core::{canonical_serialize, parse, AudioSession, Rubric, Scale};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::state::JobRecord;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} is corrupt: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("session {0} not found")]
    NotFound(String),
}

pub type StoreResult<T> = Result<T, StoreError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Transcript,
    Audio,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session: AudioSession,
    pub input: InputKind,
    pub payload_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdempotencyEntry {
    pub session_id: String,
    pub payload_hash: String,
}

pub const RAW_TRANSCRIPT: &str = "raw_transcript";
pub const REFINED_TRANSCRIPT: &str = "refined_transcript";
pub const REFINE_AUDIT: &str = "refine_audit";
pub const REPORT: &str = "report";

pub fn judgments_name(scale: Scale) -> String {
    format!("judgments_{scale}")
}

pub fn summary_name(scale: Scale) -> String {
    format!("summary_{scale}")
}

pub fn rubric_snapshot_name(scale: Scale) -> String {
    format!("rubric_{scale}")
}

/// Session ids become directory names, so they are restricted to a safe alphabet.
pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> StoreResult<Self> {
        let root = root.into();
        for sub in ["sessions", "rubrics", "idempotency", "queue"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io(&p))?;
        }
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn exists(&self, id: &str) -> bool {
        valid_session_id(id) && self.session_dir(id).join("session.json").is_file()
    }

    fn write_atomic(path: &Path, bytes: &[u8]) -> StoreResult<()> {
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(io(&tmp))?;
            f.write_all(bytes).map_err(io(&tmp))?;
            f.sync_all().map_err(io(&tmp))?;
        }
        fs::rename(&tmp, path).map_err(io(path))
    }

    fn read_json<T: DeserializeOwned>(path: &Path) -> StoreResult<Option<T>> {
        match fs::read(path) {
            Ok(bytes) => parse(&bytes)
                .map(Some)
                .map_err(|e| StoreError::Corrupt { path: path.to_owned(), message: e.to_string() }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io(path)(e)),
        }
    }

    fn write_json<T: Serialize>(path: &Path, value: &T) -> StoreResult<()> {
        Self::write_atomic(path, &canonical_serialize(value))
    }

    /// Creates the session directory with its metadata and initial job record.
    pub fn create_session(&self, meta: &SessionMeta, job: &JobRecord) -> StoreResult<()> {
        let dir = self.session_dir(&meta.session.session_id);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        Self::write_json(&dir.join("state.json"), job)?;
        // session.json last: its presence marks the session as existing.
        Self::write_json(&dir.join("session.json"), meta)
    }

    pub fn write_blob(&self, id: &str, name: &str, bytes: &[u8]) -> StoreResult<PathBuf> {
        let path = self.session_dir(id).join(name);
        Self::write_atomic(&path, bytes)?;
        Ok(path)
    }

    pub fn meta(&self, id: &str) -> StoreResult<SessionMeta> {
        if !valid_session_id(id) {
            return Err(StoreError::NotFound(id.to_owned()));
        }
        Self::read_json(&self.session_dir(id).join("session.json"))?.ok_or_else(|| StoreError::NotFound(id.to_owned()))
    }

    pub fn job(&self, id: &str) -> StoreResult<JobRecord> {
        if !self.exists(id) {
            return Err(StoreError::NotFound(id.to_owned()));
        }
        Self::read_json(&self.session_dir(id).join("state.json"))?.ok_or_else(|| StoreError::NotFound(id.to_owned()))
    }

    pub fn put_job(&self, id: &str, job: &JobRecord) -> StoreResult<()> {
        Self::write_json(&self.session_dir(id).join("state.json"), job)
    }

    pub fn artifact_path(&self, id: &str, name: &str) -> PathBuf {
        self.session_dir(id).join(format!("{name}.json"))
    }

    pub fn has_artifact(&self, id: &str, name: &str) -> bool {
        self.artifact_path(id, name).is_file()
    }

    pub fn artifact<T: DeserializeOwned>(&self, id: &str, name: &str) -> StoreResult<Option<T>> {
        Self::read_json(&self.artifact_path(id, name))
    }

    pub fn artifact_bytes(&self, id: &str, name: &str) -> StoreResult<Option<Vec<u8>>> {
        let path = self.artifact_path(id, name);
        match fs::read(&path) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io(&path)(e)),
        }
    }

    pub fn put_artifact<T: Serialize>(&self, id: &str, name: &str, value: &T) -> StoreResult<()> {
        Self::write_json(&self.artifact_path(id, name), value)
    }

    pub fn append_line<T: Serialize>(&self, id: &str, file: &str, value: &T) -> StoreResult<()> {
        let path = self.session_dir(id).join(file);
        let mut line = serde_json::to_string(value).map_err(|e| StoreError::Corrupt { path: path.clone(), message: e.to_string() })?;
        line.push('\n');
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        f.write_all(line.as_bytes()).map_err(io(&path))?;
        f.sync_all().map_err(io(&path))
    }

    pub fn read_lines<T: DeserializeOwned>(&self, id: &str, file: &str) -> StoreResult<Vec<T>> {
        let path = self.session_dir(id).join(file);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io(&path)(e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| StoreError::Corrupt { path: path.clone(), message: e.to_string() })
            })
            .collect()
    }

    pub fn list_sessions(&self) -> StoreResult<Vec<String>> {
        let dir = self.root.join("sessions");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io(&dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|id| self.exists(id))
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn rubrics(&self) -> StoreResult<Vec<Rubric>> {
        let mut out = Vec::new();
        for scale in [Scale::EcqrsEc, Scale::Sstew] {
            if let Some(r) = self.rubric(scale)? {
                out.push(r);
            }
        }
        Ok(out)
    }

    pub fn rubric(&self, scale: Scale) -> StoreResult<Option<Rubric>> {
        Self::read_json(&self.root.join("rubrics").join(format!("{scale}.json")))
    }

    pub fn put_rubric(&self, rubric: &Rubric) -> StoreResult<()> {
        Self::write_json(&self.root.join("rubrics").join(format!("{}.json", rubric.scale)), rubric)
    }

    fn idempotency_path(&self, key: &str) -> PathBuf {
        let digest = hex::encode(Sha256::digest(key.as_bytes()));
        self.root.join("idempotency").join(format!("{digest}.json"))
    }

    pub fn idempotency(&self, key: &str) -> StoreResult<Option<IdempotencyEntry>> {
        Self::read_json(&self.idempotency_path(key))
    }

    pub fn put_idempotency(&self, key: &str, entry: &IdempotencyEntry) -> StoreResult<()> {
        Self::write_json(&self.idempotency_path(key), entry)
    }

    pub fn enqueue(&self, id: &str) -> StoreResult<()> {
        let p = self.root.join("queue").join(id);
        fs::write(&p, b"").map_err(io(&p))
    }

    pub fn dequeue(&self, id: &str) -> StoreResult<()> {
        let p = self.root.join("queue").join(id);
        match fs::remove_file(&p) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io(&p)(e)),
            _ => Ok(()),
        }
    }

    pub fn queued(&self) -> StoreResult<Vec<String>> {
        let dir = self.root.join("queue");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io(&dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|id| self.exists(id))
            .collect();
        ids.sort();
        Ok(ids)
    }
}
