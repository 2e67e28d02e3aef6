//! On-disk layout:
//!
//! ```text
//! sessions/{id}/manifest.json     session tree
//! sessions/{id}/meta.json         backend name and other fixed settings
//! sessions/{id}/jobs/{job}.json   job records
//! sessions/{id}/requests/{key}.json  stored idempotent responses
//! requests/{key}.json             stored responses of session creation
//! traces/{hash}.trc               content-addressed traces
//! artifacts/{id}/...              images, masks, segmentations
//! ```

use std::path::{Path, PathBuf};

use pme_core::pipeline::{ItemError, VariationOptions};
use pme_core::session::{NodeId, Session, TraceStore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub session: String,
    pub node: NodeId,
    pub object_pos: usize,
    pub proxies: Vec<String>,
    pub options: VariationOptions,
    pub status: JobStatus,
    /// Session-wide ids of the gallery items this job produced.
    #[serde(default)]
    pub variations: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ItemError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub backend: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredResponse {
    pub request: String,
    pub status: u16,
    pub body: serde_json::Value,
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    pub traces: TraceStore,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> pme_core::Result<Option<T>> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> pme_core::Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

pub fn key_digest(key: &str) -> String {
    Sha256::digest(key.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Session and job ids are generated by the service; anything else is
/// rejected before it reaches the file system.
pub fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> pme_core::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(root.join("sessions"))?;
        std::fs::create_dir_all(root.join("artifacts"))?;
        let traces = TraceStore::open(root.join("traces"))?;
        Ok(Self { root, traces })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn artifacts_dir(&self, id: &str) -> PathBuf {
        self.root.join("artifacts").join(id)
    }

    pub fn save_session(&self, session: &Session) -> pme_core::Result<()> {
        write_atomic(
            &self.session_dir(&session.id).join("manifest.json"),
            &session.to_json()?,
        )?;
        Ok(())
    }

    pub fn load_session(&self, id: &str) -> pme_core::Result<Option<Session>> {
        if !is_safe_id(id) {
            return Ok(None);
        }
        match std::fs::read(self.session_dir(id).join("manifest.json")) {
            Ok(bytes) => Ok(Some(Session::from_json(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn save_meta(&self, id: &str, meta: &SessionMeta) -> pme_core::Result<()> {
        write_json(&self.session_dir(id).join("meta.json"), meta)
    }

    pub fn load_meta(&self, id: &str) -> pme_core::Result<Option<SessionMeta>> {
        read_json(&self.session_dir(id).join("meta.json"))
    }

    pub fn list_sessions(&self) -> pme_core::Result<Vec<String>> {
        let mut ids: Vec<String> = std::fs::read_dir(self.root.join("sessions"))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("manifest.json").exists())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    pub fn save_job(&self, job: &JobRecord) -> pme_core::Result<()> {
        write_json(
            &self
                .session_dir(&job.session)
                .join("jobs")
                .join(format!("{}.json", job.id)),
            job,
        )
    }

    pub fn load_jobs(&self, session: &str) -> pme_core::Result<Vec<JobRecord>> {
        let dir = self.session_dir(session).join("jobs");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut jobs = Vec::new();
        for e in std::fs::read_dir(dir)?.filter_map(|e| e.ok()) {
            if e.path().extension().is_some_and(|x| x == "json") {
                if let Some(job) = read_json(&e.path())? {
                    jobs.push(job);
                }
            }
        }
        Ok(jobs)
    }

    fn request_path(&self, session: Option<&str>, key: &str) -> PathBuf {
        let dir = match session {
            Some(id) => self.session_dir(id).join("requests"),
            None => self.root.join("requests"),
        };
        dir.join(format!("{}.json", key_digest(key)))
    }

    pub fn stored_response(
        &self,
        session: Option<&str>,
        key: &str,
    ) -> pme_core::Result<Option<StoredResponse>> {
        read_json(&self.request_path(session, key))
    }

    pub fn store_response(
        &self,
        session: Option<&str>,
        key: &str,
        response: &StoredResponse,
    ) -> pme_core::Result<()> {
        write_json(&self.request_path(session, key), response)
    }
}
