//! Settings come from flags first, then `PME_*` environment variables (both
//! handled by clap), then the TOML file given with `--config`, then defaults.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use pme_core::backend::{WorkerBackend, WorkerEmbedder};
use pme_core::pipeline::VariationOptions;
use pme_core::proxy::{EmbeddingProvider, FakeEmbedder};
use pme_core::{Backend, SyntheticBackend};
use pme_service::ServiceConfig;
use serde::Deserialize;
use serde_json::json;

/// A failure reported as `{"error": {"kind", "message"}}` on stderr.
#[derive(Debug)]
pub struct Failure {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

impl Failure {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            exit_code: 1,
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new("config", message)
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            exit_code: 2,
            ..Self::new("usage", message)
        }
    }

    pub fn to_json(&self) -> String {
        json!({"error": {"kind": self.kind, "message": self.message}}).to_string()
    }
}

impl From<pme_core::Error> for Failure {
    fn from(e: pme_core::Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::new("json", e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub backend: Option<String>,
    pub seed: Option<u64>,
    pub steps: Option<u32>,
    pub guidance: Option<f32>,
    pub jobs: Option<usize>,
    /// Shell command that starts a worker for the `real` backend.
    pub worker: Option<String>,
    /// Embedding model for proxy words, see [`make_embedder`].
    pub embedder: Option<String>,
    pub template: Option<String>,
    pub index_cache: Option<PathBuf>,
    pub variation: Option<VariationOptions>,
    pub service: Option<ServiceConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
    }
}

pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn shell(command: &str) -> Command {
    let mut c = Command::new("sh");
    c.arg("-c").arg(command);
    c
}

pub fn make_backend(name: &str, worker: Option<&str>) -> CliResult<Arc<dyn Backend>> {
    match name {
        "synthetic" => Ok(Arc::new(SyntheticBackend::default())),
        "real" => {
            let command = worker.ok_or_else(|| {
                Failure::config("the real backend needs a worker command (--worker, PME_WORKER or `worker` in the config)")
            })?;
            Ok(Arc::new(WorkerBackend::spawn(shell(command))?))
        }
        other => Err(Failure::config(format!(
            "unknown backend {other:?}; use synthetic or real"
        ))),
    }
}

/// `fake:SEED:DIM:SIZE[:WORD,WORD...]` builds the deterministic stand-in
/// with a generated vocabulary plus the listed words; `cmd:COMMAND` starts
/// an embedding worker.
pub fn make_embedder(spec: &str) -> CliResult<Arc<dyn EmbeddingProvider>> {
    if let Some(command) = spec.strip_prefix("cmd:") {
        return Ok(Arc::new(WorkerEmbedder::spawn(shell(command))?));
    }
    let bad = || {
        Failure::config(format!(
            "embedder {spec:?} is neither fake:SEED:DIM:SIZE[:WORDS] nor cmd:COMMAND"
        ))
    };
    let rest = spec.strip_prefix("fake:").ok_or_else(bad)?;
    let parts: Vec<&str> = rest.splitn(4, ':').collect();
    if parts.len() < 3 {
        return Err(bad());
    }
    let seed: u64 = parts[0].parse().map_err(|_| bad())?;
    let dim: usize = parts[1].parse().map_err(|_| bad())?;
    let size: usize = parts[2].parse().map_err(|_| bad())?;
    if dim == 0 {
        return Err(bad());
    }
    let extra: Vec<&str> = parts
        .get(3)
        .map(|w| {
            w.split(',')
                .map(str::trim)
                .filter(|w| !w.is_empty())
                .collect()
        })
        .unwrap_or_default();
    Ok(Arc::new(FakeEmbedder::generated(seed, dim, size, &extra)))
}
