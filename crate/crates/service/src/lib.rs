//! HTTP session API for exploring object variations.
//!
//! Sessions hold a tree of reference generations. Generating variations is
//! an asynchronous job; selecting a variation grows the tree. Every route
//! lives under `/v1`, and mutating routes honour an `Idempotency-Key`
//! header by replaying the stored response of the first request.

pub mod error;
pub mod store;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::future::Future;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pme_core::backend::Serialized;
use pme_core::pipeline::{
    auto_proxies, generate_variations, save_gallery, ItemError, VariationOptions,
};
use pme_core::prompt::find_word;
use pme_core::proxy::{
    build_token_index, EmbeddingProvider, TokenIndex, DEFAULT_CANDIDATES, DEFAULT_TEMPLATE,
};
use pme_core::session::{GalleryItem, NodeId, Session};
use pme_core::{Backend, DenoisingTrace, PromptSpec, RunOptions};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use error::ApiError;
pub use store::{JobRecord, JobStatus, SessionMeta, Store, StoredResponse};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const REPLAYED_HEADER: &str = "idempotent-replayed";
pub const DEFAULT_MAX_PENDING: usize = 16;
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub root: PathBuf,
    pub bind: String,
    /// Queued plus running jobs across all sessions before new jobs get 503.
    pub max_pending_jobs: usize,
    pub ui_dir: Option<PathBuf>,
    pub proxy_template: String,
    pub proxy_candidates: usize,
    /// Backend used when a session does not name one.
    pub default_backend: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("pme-data"),
            bind: DEFAULT_BIND.to_string(),
            max_pending_jobs: DEFAULT_MAX_PENDING,
            ui_dir: None,
            proxy_template: DEFAULT_TEMPLATE.to_string(),
            proxy_candidates: DEFAULT_CANDIDATES,
            default_backend: "synthetic".to_string(),
        }
    }
}

pub struct ServiceBuilder {
    config: ServiceConfig,
    backends: BTreeMap<String, Arc<dyn Backend>>,
    embedder: Option<Arc<dyn EmbeddingProvider>>,
}

impl ServiceBuilder {
    pub fn new(config: ServiceConfig) -> Self {
        Self {
            config,
            backends: BTreeMap::new(),
            embedder: None,
        }
    }

    /// Registers a backend; its runs are admitted one at a time in arrival order.
    pub fn backend(mut self, name: impl Into<String>, backend: Arc<dyn Backend>) -> Self {
        self.backends
            .insert(name.into(), Arc::new(Serialized::new(backend)));
        self
    }

    /// Text embedding model used for automatic proxy words.
    pub fn embedder(mut self, embedder: Arc<dyn EmbeddingProvider>) -> Self {
        self.embedder = Some(embedder);
        self
    }

    /// Opens the store and loads every session in it. Jobs that were queued
    /// or running when the previous process stopped are marked failed.
    pub fn build(self) -> pme_core::Result<AppState> {
        if !self.backends.contains_key(&self.config.default_backend) {
            return Err(pme_core::Error::InvalidValue(format!(
                "default backend {:?} is not registered",
                self.config.default_backend
            )));
        }
        let store = Store::open(&self.config.root)?;
        let mut sessions = HashMap::new();
        for id in store.list_sessions()? {
            let Some(session) = store.load_session(&id)? else {
                continue;
            };
            let meta = store.load_meta(&id)?.unwrap_or(SessionMeta {
                backend: self.config.default_backend.clone(),
            });
            let mut jobs = BTreeMap::new();
            for mut job in store.load_jobs(&id)? {
                if matches!(job.status, JobStatus::Queued | JobStatus::Running) {
                    job.status = JobStatus::Failed;
                    job.error = Some(ItemError {
                        kind: "interrupted".into(),
                        message: "the service stopped before the job finished".into(),
                    });
                    store.save_job(&job)?;
                }
                jobs.insert(job.id.clone(), job);
            }
            sessions.insert(id, Arc::new(SessionSlot::new(meta, session, jobs)));
        }
        tracing::info!(root = %self.config.root.display(), sessions = sessions.len(), "store opened");
        Ok(AppState {
            inner: Arc::new(Inner {
                config: self.config,
                store,
                backends: self.backends,
                embedder: self.embedder,
                index: Mutex::new(None),
                sessions: Mutex::new(sessions),
                pending: AtomicUsize::new(0),
                in_flight: Mutex::new(HashSet::new()),
            }),
        })
    }
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    store: Store,
    backends: BTreeMap<String, Arc<dyn Backend>>,
    embedder: Option<Arc<dyn EmbeddingProvider>>,
    index: Mutex<Option<Arc<TokenIndex>>>,
    sessions: Mutex<HashMap<String, Arc<SessionSlot>>>,
    pending: AtomicUsize,
    in_flight: Mutex<HashSet<String>>,
}

struct SessionSlot {
    meta: SessionMeta,
    /// Held by user mutations; a second concurrent mutation gets 409.
    mutation: tokio::sync::Mutex<()>,
    state: Mutex<SessionState>,
}

struct SessionState {
    session: Session,
    jobs: BTreeMap<String, JobRecord>,
}

impl SessionSlot {
    fn new(meta: SessionMeta, session: Session, jobs: BTreeMap<String, JobRecord>) -> Self {
        Self {
            meta,
            mutation: tokio::sync::Mutex::new(()),
            state: Mutex::new(SessionState { session, jobs }),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, SessionState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl AppState {
    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    /// Queued plus running jobs.
    pub fn pending_jobs(&self) -> usize {
        self.inner.pending.load(Ordering::SeqCst)
    }

    fn slot(&self, id: &str) -> ApiResult<Arc<SessionSlot>> {
        lock(&self.inner.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }

    fn backend(&self, name: &str) -> ApiResult<Arc<dyn Backend>> {
        self.inner
            .backends
            .get(name)
            .cloned()
            .ok_or_else(|| ApiError::invalid(format!("unknown backend {name:?}")))
    }

    fn token_index(&self, provider: &dyn EmbeddingProvider) -> pme_core::Result<Arc<TokenIndex>> {
        let mut slot = lock(&self.inner.index);
        if let Some(index) = slot.as_ref() {
            return Ok(index.clone());
        }
        let cache = self.inner.store.root().join("index");
        let index = Arc::new(build_token_index(
            provider,
            &self.inner.config.proxy_template,
            Some(&cache),
        )?);
        *slot = Some(index.clone());
        Ok(index)
    }

    async fn load_trace(&self, hash: String) -> ApiResult<Arc<DenoisingTrace>> {
        let state = self.clone();
        blocking(move || Ok(state.inner.store.traces.get(&hash)?)).await
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker task failed: {e}")))?
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/backends", get(list_backends))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/variations", post(create_variations))
        .route("/sessions/{id}/jobs", get(list_jobs))
        .route("/sessions/{id}/jobs/{job}", get(get_job))
        .route("/sessions/{id}/select", post(select))
        .route("/sessions/{id}/checkout", post(checkout))
        .route("/sessions/{id}/tree", get(tree))
        .route("/sessions/{id}/nodes/{node}", get(get_node))
        .route("/artifacts/{id}/{*path}", get(artifact));
    let mut app = Router::new().nest("/v1", api);
    if state.inner.config.ui_dir.is_some() {
        app = app
            .route("/ui", get(ui_index))
            .route("/ui/", get(ui_index))
            .route("/ui/{*path}", get(ui_file));
    }
    app.fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(&state.inner.config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn artifact_url(session: &str, path: &Path) -> String {
    let rel: Vec<String> = path
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect();
    format!("/v1/artifacts/{session}/{}", rel.join("/"))
}

fn parse_body<T: for<'de> Deserialize<'de>>(bytes: &Bytes) -> ApiResult<(T, Value)> {
    let raw: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        bytes
    };
    let value: Value = serde_json::from_slice(raw)
        .map_err(|e| ApiError::invalid(format!("malformed JSON: {e}")))?;
    let parsed =
        T::deserialize(&value).map_err(|e| ApiError::invalid(format!("invalid request: {e}")))?;
    Ok((parsed, value))
}

fn request_fingerprint(method: &Method, uri: &Uri, body: &Value) -> String {
    // serde_json maps are ordered, so equal documents serialize identically.
    let canonical = serde_json::to_vec(body).unwrap_or_default();
    let digest: String = Sha256::digest(&canonical)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    format!("{method} {} {digest}", uri.path())
}

/// Runs `f` at most once per idempotency key within `scope` (a session id,
/// or `None` for session creation). Successful responses are stored and
/// replayed for later requests with the same key; reusing a key for a
/// different request is rejected.
async fn idempotent<F, Fut>(
    state: &AppState,
    scope: Option<&str>,
    headers: &HeaderMap,
    fingerprint: String,
    f: F,
) -> Response
where
    F: FnOnce() -> Fut,
    Fut: Future<Output = ApiResult<(StatusCode, Value)>>,
{
    let key = match headers.get(IDEMPOTENCY_HEADER).map(HeaderValue::to_str) {
        None => return respond(f().await),
        Some(Ok(k)) if !k.is_empty() && k.len() <= 256 => k.to_string(),
        Some(_) => {
            return ApiError::invalid("Idempotency-Key must be 1 to 256 visible ASCII characters")
                .into_response()
        }
    };
    let store = &state.inner.store;
    match store.stored_response(scope, &key) {
        Ok(Some(stored)) if stored.request == fingerprint => {
            let status = StatusCode::from_u16(stored.status).unwrap_or(StatusCode::OK);
            let mut resp = (status, Json(stored.body)).into_response();
            resp.headers_mut()
                .insert(REPLAYED_HEADER, HeaderValue::from_static("true"));
            return resp;
        }
        Ok(Some(_)) => {
            return ApiError::invalid("Idempotency-Key was already used for a different request")
                .into_response()
        }
        Ok(None) => {}
        Err(e) => return ApiError::from(e).into_response(),
    }
    let tag = format!("{}/{key}", scope.unwrap_or(""));
    if !lock(&state.inner.in_flight).insert(tag.clone()) {
        return ApiError::conflict("a request with this Idempotency-Key is in progress")
            .into_response();
    }
    let result = f().await;
    if let Ok((status, body)) = &result {
        let stored = StoredResponse {
            request: fingerprint,
            status: status.as_u16(),
            body: body.clone(),
        };
        if let Err(e) = store.store_response(scope, &key, &stored) {
            tracing::warn!(error = %e, "could not store idempotent response");
        }
    }
    lock(&state.inner.in_flight).remove(&tag);
    respond(result)
}

fn respond(result: ApiResult<(StatusCode, Value)>) -> Response {
    match result {
        Ok((status, body)) => (status, Json(body)).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(json!({"status": "ok", "pending_jobs": state.pending_jobs()}))
}

async fn list_backends(State(state): State<AppState>) -> Json<Value> {
    let backends: Vec<Value> = state
        .inner
        .backends
        .iter()
        .map(|(name, b)| json!({"name": name, "info": b.describe()}))
        .collect();
    Json(json!({"default": state.inner.config.default_backend, "backends": backends}))
}

fn noun_list(prompt: &PromptSpec) -> Vec<Value> {
    prompt
        .noun_positions
        .iter()
        .map(|&p| {
            let word = if p == prompt.object_token_pos {
                prompt.object_word().to_string()
            } else {
                prompt.tokens[p].piece.clone()
            };
            json!({"word": word, "pos": p, "preserved": prompt.preserve_nouns.contains(&p)})
        })
        .collect()
}

/// Token position of the noun `word` in `prompt`.
fn resolve_noun(prompt: &PromptSpec, word: &str) -> ApiResult<usize> {
    find_word(&prompt.text, &prompt.tokens, word)
        .map(|(p, _)| p)
        .filter(|p| prompt.noun_positions.contains(p))
        .ok_or_else(|| ApiError::invalid(format!("{word:?} is not a noun of {:?}", prompt.text)))
}

fn noun_word(prompt: &PromptSpec, pos: usize) -> String {
    prompt
        .with_object_at(pos)
        .map(|p| p.object_word().to_string())
        .unwrap_or_default()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    prompt: String,
    /// Noun to vary first.
    object: String,
    nouns: Option<Vec<String>>,
    #[serde(default)]
    preserve: Vec<String>,
    seed: Option<u64>,
    backend: Option<String>,
    steps: Option<u32>,
    guidance: Option<f32>,
}

async fn create_session(
    State(state): State<AppState>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let (req, value) = match parse_body::<CreateSession>(&body) {
        Ok(v) => v,
        Err(e) => return e.into_response(),
    };
    let fingerprint = request_fingerprint(&method, &uri, &value);
    let st = state.clone();
    idempotent(&state, None, &headers, fingerprint, || async move {
        let backend_name = req
            .backend
            .clone()
            .unwrap_or_else(|| st.inner.config.default_backend.clone());
        let backend = st.backend(&backend_name)?;
        let st2 = st.clone();
        let created =
            blocking(move || create_session_blocking(&st2, backend_name, backend, req)).await?;
        Ok((StatusCode::CREATED, created))
    })
    .await
}

fn create_session_blocking(
    state: &AppState,
    backend_name: String,
    backend: Arc<dyn Backend>,
    req: CreateSession,
) -> ApiResult<Value> {
    let tokenizer = backend.tokenizer();
    let nouns: Option<Vec<&str>> = req
        .nouns
        .as_ref()
        .map(|v| v.iter().map(String::as_str).collect());
    let preserve: Vec<&str> = req.preserve.iter().map(String::as_str).collect();
    let prompt = PromptSpec::parse(
        tokenizer.as_ref(),
        &req.prompt,
        &req.object,
        nouns.as_deref(),
        &preserve,
    )?;
    let steps = req
        .steps
        .unwrap_or_else(|| backend.describe().default_steps);
    if steps == 0 {
        return Err(ApiError::invalid("steps must be at least 1"));
    }
    let seed = req.seed.unwrap_or_else(rand::random);
    let mut options = RunOptions::with_seed(seed);
    if let Some(g) = req.guidance {
        if !g.is_finite() {
            return Err(ApiError::invalid("guidance must be finite"));
        }
        options.guidance = g;
    }
    let generation = backend.run_reference(&prompt, steps, &options)?;
    let store = &state.inner.store;
    let hash = store.traces.put(&generation.trace)?;
    let id = loop {
        let candidate = format!("s{:016x}", rand::random::<u64>());
        if !lock(&state.inner.sessions).contains_key(&candidate)
            && !store.session_dir(&candidate).exists()
        {
            break candidate;
        }
    };
    let image = PathBuf::from("reference.png");
    std::fs::create_dir_all(store.artifacts_dir(&id))?;
    generation
        .image
        .save_png(&store.artifacts_dir(&id).join(&image))?;
    let session = Session::new(
        &id,
        hash,
        Some(image.clone()),
        Some(prompt.object_token_pos),
    );
    let meta = SessionMeta {
        backend: backend_name.clone(),
    };
    store.save_meta(&id, &meta)?;
    store.save_session(&session)?;
    lock(&state.inner.sessions).insert(
        id.clone(),
        Arc::new(SessionSlot::new(meta, session, BTreeMap::new())),
    );
    tracing::info!(session = %id, backend = %backend_name, seed, "session created");
    Ok(json!({
        "session_id": id,
        "node": 0,
        "backend": backend_name,
        "seed": seed,
        "steps": steps,
        "prompt": prompt.text,
        "object": {"word": prompt.object_word(), "pos": prompt.object_token_pos},
        "nouns": noun_list(&prompt),
        "reference_image": artifact_url(&id, &image),
    }))
}

async fn list_sessions(State(state): State<AppState>) -> Json<Value> {
    let slots: Vec<(String, Arc<SessionSlot>)> = lock(&state.inner.sessions)
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut out: Vec<Value> = slots
        .iter()
        .map(|(id, slot)| {
            let s = slot.lock();
            json!({"session_id": id, "backend": slot.meta.backend, "nodes": s.session.nodes.len(), "current": s.session.current})
        })
        .collect();
    out.sort_by(|a, b| a["session_id"].as_str().cmp(&b["session_id"].as_str()));
    Json(json!({"sessions": out}))
}

async fn get_session(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    let slot = state.slot(&id)?;
    let s = slot.lock();
    Ok(Json(json!({
        "session_id": id,
        "backend": slot.meta.backend,
        "current": s.session.current,
        "nodes": s.session.nodes.len(),
        "depth": s.session.depth(),
        "jobs": s.jobs.keys().collect::<Vec<_>>(),
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariationRequest {
    /// Noun to vary; defaults to the node's focus.
    object: Option<String>,
    proxies: Option<Vec<String>>,
    /// Number of automatic proxy words.
    auto: Option<usize>,
    /// Node whose reference is varied; defaults to the current node.
    node: Option<NodeId>,
    #[serde(default)]
    options: VariationOptions,
}

enum ProxySource {
    Given(Vec<String>),
    Auto(usize),
}

async fn create_variations(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let slot = match state.slot(&id) {
        Ok(s) => s,
        Err(e) => return e.into_response(),
    };
    let (req, value) = match parse_body::<VariationRequest>(&body) {
        Ok(v) => v,
        Err(e) => return e.into_response(),
    };
    let fingerprint = request_fingerprint(&method, &uri, &value);
    let st = state.clone();
    let sid = id.clone();
    idempotent(&state, Some(&id), &headers, fingerprint, || async move {
        let _guard = slot
            .mutation
            .try_lock()
            .map_err(|_| ApiError::conflict("another request is changing this session"))?;
        let source = match (req.proxies, req.auto) {
            (Some(_), Some(_)) => return Err(ApiError::invalid("give either proxies or auto, not both")),
            (None, None) => return Err(ApiError::invalid("give proxies or auto")),
            (Some(p), None) => {
                if p.iter().any(|w| w.trim().is_empty()) {
                    return Err(ApiError::invalid("proxy words must not be empty"));
                }
                ProxySource::Given(p)
            }
            (None, Some(m)) => {
                if st.inner.embedder.is_none() {
                    return Err(ApiError::invalid("automatic proxies need an embedding model, none is configured"));
                }
                ProxySource::Auto(m)
            }
        };
        let (node, trace_hash, focus) = {
            let s = slot.lock();
            let node = req.node.unwrap_or(s.session.current);
            let n = s.session.node(node).map_err(|_| ApiError::not_found(format!("unknown node {node}")))?;
            (node, n.trace.clone(), n.focus)
        };
        let trace = st.load_trace(trace_hash).await?;
        let object_pos = match &req.object {
            Some(word) => resolve_noun(trace.prompt(), word)?,
            None => focus.ok_or_else(|| ApiError::invalid("no object given and the node has no focus"))?,
        };
        req.options.validate(trace.total_steps())?;
        let pending = &st.inner.pending;
        if pending.fetch_add(1, Ordering::SeqCst) >= st.inner.config.max_pending_jobs {
            pending.fetch_sub(1, Ordering::SeqCst);
            return Err(ApiError::saturated("too many pending jobs, retry later"));
        }
        let job = {
            let mut s = slot.lock();
            let job = JobRecord {
                id: format!("j{}", s.jobs.len()),
                session: sid.clone(),
                node,
                object_pos,
                proxies: match &source {
                    ProxySource::Given(p) => p.clone(),
                    ProxySource::Auto(_) => Vec::new(),
                },
                options: req.options,
                status: JobStatus::Queued,
                variations: Vec::new(),
                error: None,
            };
            if let Err(e) = st.inner.store.save_job(&job) {
                pending.fetch_sub(1, Ordering::SeqCst);
                return Err(e.into());
            }
            s.jobs.insert(job.id.clone(), job.clone());
            job
        };
        let backend = match st.backend(&slot.meta.backend) {
            Ok(b) => b,
            Err(e) => {
                pending.fetch_sub(1, Ordering::SeqCst);
                return Err(e);
            }
        };
        let auto = match source {
            ProxySource::Auto(m) => Some(m),
            ProxySource::Given(_) => None,
        };
        let runner = JobRunner {
            state: st.clone(),
            slot: slot.clone(),
            job: job.id.clone(),
            backend,
            trace,
            auto,
        };
        tokio::task::spawn_blocking(move || runner.run());
        tracing::info!(session = %sid, job = %job.id, node, object_pos, "job queued");
        Ok((
            StatusCode::ACCEPTED,
            json!({"job_id": job.id, "status": job.status, "node": node, "url": format!("/v1/sessions/{sid}/jobs/{}", job.id)}),
        ))
    })
    .await
}

struct JobRunner {
    state: AppState,
    slot: Arc<SessionSlot>,
    job: String,
    backend: Arc<dyn Backend>,
    trace: Arc<DenoisingTrace>,
    auto: Option<usize>,
}

struct Produced {
    proxies: Vec<String>,
    items: Vec<GalleryItem>,
}

impl JobRunner {
    fn update(&self, f: impl FnOnce(&mut SessionState, &mut JobRecord)) -> JobRecord {
        let mut s = self.slot.lock();
        let mut job = s.jobs[&self.job].clone();
        f(&mut s, &mut job);
        if let Err(e) = self.state.inner.store.save_job(&job) {
            tracing::error!(job = %job.id, error = %e, "could not persist job");
        }
        s.jobs.insert(job.id.clone(), job.clone());
        job
    }

    fn run(self) {
        let job = self.update(|_, j| j.status = JobStatus::Running);
        let produced = self.produce(&job);
        let store = &self.state.inner.store;
        self.update(|s, j| match produced {
            Ok(mut p) => {
                let offset = s.session.nodes[j.node].gallery.len();
                for (i, item) in p.items.iter_mut().enumerate() {
                    item.id = format!("n{}-v{}", j.node, offset + i);
                }
                let ids: Vec<String> = p.items.iter().map(|i| i.id.clone()).collect();
                let saved = s
                    .session
                    .add_gallery(j.node, p.items)
                    .and_then(|_| store.save_session(&s.session));
                match saved {
                    Ok(()) => {
                        j.status = JobStatus::Done;
                        j.proxies = p.proxies;
                        j.variations = ids;
                    }
                    Err(e) => {
                        j.status = JobStatus::Failed;
                        j.error = Some(ItemError::from(&e));
                    }
                }
            }
            Err(e) => {
                j.status = JobStatus::Failed;
                j.error = Some(ItemError::from(&e));
            }
        });
        self.state.inner.pending.fetch_sub(1, Ordering::SeqCst);
        tracing::info!(job = %self.job, "job finished");
    }

    fn produce(&self, job: &JobRecord) -> pme_core::Result<Produced> {
        let proxies =
            match self.auto {
                None => job.proxies.clone(),
                Some(m) => {
                    let provider =
                        self.state.inner.embedder.as_ref().ok_or_else(|| {
                            pme_core::Error::Provider("no embedding model".into())
                        })?;
                    let index = self.state.token_index(provider.as_ref())?;
                    let prompt = self.trace.prompt().with_object_at(job.object_pos)?;
                    auto_proxies(
                        &index,
                        provider.as_ref(),
                        &prompt,
                        self.state.inner.config.proxy_candidates,
                        m,
                    )?
                }
            };
        let outcomes = generate_variations(
            self.backend.as_ref(),
            &self.trace,
            job.object_pos,
            &proxies,
            &job.options,
        )?;
        let store = &self.state.inner.store;
        let rel = PathBuf::from(&job.id);
        let manifest = save_gallery(
            &store.artifacts_dir(&job.session).join(&rel),
            &self.trace,
            job.object_pos,
            None,
            &outcomes,
        )?;
        let mut items = Vec::with_capacity(outcomes.len());
        for (outcome, entry) in outcomes.iter().zip(manifest.variations) {
            let trace = match outcome.ok() {
                Some(v) => Some(store.traces.put(&v.trace)?),
                None => None,
            };
            let under = |p: Option<PathBuf>| p.map(|p| rel.join(p));
            items.push(GalleryItem {
                id: entry.id,
                proxy: entry.proxy,
                object_pos: job.object_pos,
                options: job.options.clone(),
                image: under(entry.image),
                trace,
                masks: pme_core::pipeline::MaskPaths {
                    retention: under(entry.masks.retention),
                    segmentation: under(entry.masks.segmentation),
                    reference_segmentation: under(entry.masks.reference_segmentation),
                    object: under(entry.masks.object),
                },
                elapsed_ms: entry.elapsed_ms,
                error: entry.error,
            });
        }
        Ok(Produced { proxies, items })
    }
}

fn gallery_json(session: &str, item: &GalleryItem) -> Value {
    let url = |p: &Option<PathBuf>| p.as_ref().map(|p| artifact_url(session, p));
    json!({
        "id": item.id,
        "proxy": item.proxy,
        "object_pos": item.object_pos,
        "image": url(&item.image),
        "masks": {
            "retention": url(&item.masks.retention),
            "segmentation": url(&item.masks.segmentation),
            "reference_segmentation": url(&item.masks.reference_segmentation),
            "object": url(&item.masks.object),
        },
        "trace": item.trace,
        "elapsed_ms": item.elapsed_ms,
        "error": item.error,
    })
}

fn job_json(state: &SessionState, job: &JobRecord) -> Value {
    let gallery: Vec<Value> = job
        .variations
        .iter()
        .filter_map(|v| state.session.find_variation(v))
        .map(|(_, item)| gallery_json(&job.session, item))
        .collect();
    json!({
        "job_id": job.id,
        "status": job.status,
        "node": job.node,
        "object_pos": job.object_pos,
        "proxies": job.proxies,
        "options": job.options,
        "gallery": if job.status == JobStatus::Done { Some(gallery) } else { None },
        "error": job.error,
    })
}

async fn list_jobs(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    let slot = state.slot(&id)?;
    let s = slot.lock();
    let jobs: Vec<Value> = s
        .jobs
        .values()
        .map(|j| json!({"job_id": j.id, "status": j.status, "node": j.node}))
        .collect();
    Ok(Json(json!({"jobs": jobs})))
}

async fn get_job(
    State(state): State<AppState>,
    UrlPath((id, job)): UrlPath<(String, String)>,
) -> ApiResult<Json<Value>> {
    let slot = state.slot(&id)?;
    let s = slot.lock();
    let record = s
        .jobs
        .get(&job)
        .ok_or_else(|| ApiError::not_found(format!("unknown job {job}")))?;
    Ok(Json(job_json(&s, record)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectRequest {
    variation_id: String,
    /// Noun the new node will vary next.
    object: Option<String>,
    /// Rejects the request with 409 unless the session's current node is this one.
    expected_current: Option<NodeId>,
}

fn check_expected(session: &Session, expected: Option<NodeId>) -> ApiResult<()> {
    match expected {
        Some(e) if e != session.current => Err(ApiError::conflict(format!(
            "current node is {}, not {e}",
            session.current
        ))),
        _ => Ok(()),
    }
}

async fn select(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let slot = match state.slot(&id) {
        Ok(s) => s,
        Err(e) => return e.into_response(),
    };
    let (req, value) = match parse_body::<SelectRequest>(&body) {
        Ok(v) => v,
        Err(e) => return e.into_response(),
    };
    let fingerprint = request_fingerprint(&method, &uri, &value);
    let st = state.clone();
    let sid = id.clone();
    idempotent(&state, Some(&id), &headers, fingerprint, || async move {
        let id = sid;
        let _guard = slot
            .mutation
            .try_lock()
            .map_err(|_| ApiError::conflict("another request is changing this session"))?;
        let trace_hash = {
            let s = slot.lock();
            check_expected(&s.session, req.expected_current)?;
            let (node, item) = s.session.find_variation(&req.variation_id).ok_or_else(|| {
                ApiError::not_found(format!("unknown variation {}", req.variation_id))
            })?;
            if node != s.session.current {
                return Err(ApiError::conflict(format!(
                    "variation {} belongs to node {node}, the current node is {}",
                    req.variation_id, s.session.current
                )));
            }
            item.trace.clone().ok_or_else(|| {
                ApiError::invalid(format!(
                    "variation {} failed and cannot be selected",
                    req.variation_id
                ))
            })?
        };
        let trace = st.load_trace(trace_hash).await?;
        let focus = req
            .object
            .as_deref()
            .map(|w| resolve_noun(trace.prompt(), w))
            .transpose()?;
        let mut s = slot.lock();
        check_expected(&s.session, req.expected_current)?;
        let previous = s.session.current;
        let node = s.session.continue_from(&req.variation_id, focus)?;
        if let Err(e) = st.inner.store.save_session(&s.session) {
            s.session.nodes.pop();
            s.session.current = previous;
            return Err(e.into());
        }
        let n = &s.session.nodes[node];
        Ok((
            StatusCode::CREATED,
            json!({
                "node": node,
                "current": s.session.current,
                "parent": n.parent,
                "image": n.image.as_ref().map(|p| artifact_url(&id, p)),
                "focus": focus.map(|p| json!({"word": noun_word(trace.prompt(), p), "pos": p})),
                "nouns": noun_list(trace.prompt()),
            }),
        ))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckoutRequest {
    node: NodeId,
    expected_current: Option<NodeId>,
}

async fn checkout(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    method: Method,
    uri: Uri,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let slot = match state.slot(&id) {
        Ok(s) => s,
        Err(e) => return e.into_response(),
    };
    let (req, value) = match parse_body::<CheckoutRequest>(&body) {
        Ok(v) => v,
        Err(e) => return e.into_response(),
    };
    let fingerprint = request_fingerprint(&method, &uri, &value);
    let st = state.clone();
    idempotent(&state, Some(&id), &headers, fingerprint, || async move {
        let _guard = slot
            .mutation
            .try_lock()
            .map_err(|_| ApiError::conflict("another request is changing this session"))?;
        let mut s = slot.lock();
        check_expected(&s.session, req.expected_current)?;
        let previous = s.session.current;
        s.session.checkout(req.node)?;
        if let Err(e) = st.inner.store.save_session(&s.session) {
            s.session.current = previous;
            return Err(e.into());
        }
        Ok((StatusCode::OK, json!({"current": s.session.current})))
    })
    .await
}

fn node_json(session_id: &str, session: &Session, node: NodeId, trace: &DenoisingTrace) -> Value {
    let n = &session.nodes[node];
    json!({
        "id": n.id,
        "parent": n.parent,
        "children": session.children(node).map(|c| c.id).collect::<Vec<_>>(),
        "image": n.image.as_ref().map(|p| artifact_url(session_id, p)),
        "trace": n.trace,
        "prompt": trace.prompt().text,
        "seed": trace.seed(),
        "nouns": noun_list(trace.prompt()),
        "focus": n.focus.map(|p| json!({"word": noun_word(trace.prompt(), p), "pos": p})),
        "produced_by": n.produced_by.as_ref().map(|p| json!({
            "variation": p.variation,
            "proxy": p.proxy,
            "object_pos": p.object_pos,
        })),
    })
}

async fn tree(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    let slot = state.slot(&id)?;
    let session = slot.lock().session.clone();
    let st = state.clone();
    let traces = {
        let hashes: Vec<String> = session.nodes.iter().map(|n| n.trace.clone()).collect();
        blocking(move || {
            hashes
                .iter()
                .map(|h| st.inner.store.traces.get(h).map_err(ApiError::from))
                .collect::<ApiResult<Vec<_>>>()
        })
        .await?
    };
    let nodes: Vec<Value> = (0..session.nodes.len())
        .map(|i| node_json(&id, &session, i, &traces[i]))
        .collect();
    Ok(Json(json!({
        "session_id": id,
        "current": session.current,
        "depth": session.depth(),
        "nodes": nodes,
    })))
}

async fn get_node(
    State(state): State<AppState>,
    UrlPath((id, node)): UrlPath<(String, NodeId)>,
) -> ApiResult<Json<Value>> {
    let slot = state.slot(&id)?;
    let session = slot.lock().session.clone();
    let n = session
        .node(node)
        .map_err(|_| ApiError::not_found(format!("unknown node {node}")))?;
    let trace = state.load_trace(n.trace.clone()).await?;
    let mut value = node_json(&id, &session, node, &trace);
    value["gallery"] = n.gallery.iter().map(|g| gallery_json(&id, g)).collect();
    Ok(Json(value))
}

/// `rel` joined under `base`, or `None` if it could leave `base`.
fn confined(base: &Path, rel: &str) -> Option<PathBuf> {
    if rel.is_empty() || rel.contains('\\') {
        return None;
    }
    let rel = Path::new(rel);
    rel.components()
        .all(|c| matches!(c, Component::Normal(_)))
        .then(|| base.join(rel))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("svg") => "image/svg+xml",
        Some("csv") => "text/csv",
        _ => "application/octet-stream",
    }
}

async fn send_file(path: PathBuf) -> ApiResult<Response> {
    match tokio::fs::read(&path).await {
        Ok(bytes) => Ok((
            [(header::CONTENT_TYPE, content_type(&path))],
            Body::from(bytes),
        )
            .into_response()),
        Err(e)
            if matches!(
                e.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::IsADirectory
            ) =>
        {
            Err(ApiError::not_found("no such artifact"))
        }
        Err(e) => Err(e.into()),
    }
}

async fn artifact(
    State(state): State<AppState>,
    UrlPath((id, path)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    state.slot(&id)?;
    let file = confined(&state.inner.store.artifacts_dir(&id), &path)
        .ok_or_else(|| ApiError::not_found("no such artifact"))?;
    send_file(file).await
}

async fn ui_index(State(state): State<AppState>) -> ApiResult<Response> {
    let dir = state
        .inner
        .config
        .ui_dir
        .clone()
        .ok_or_else(|| ApiError::not_found("no UI configured"))?;
    send_file(dir.join("index.html")).await
}

async fn ui_file(
    State(state): State<AppState>,
    UrlPath(path): UrlPath<String>,
) -> ApiResult<Response> {
    let dir = state
        .inner
        .config
        .ui_dir
        .clone()
        .ok_or_else(|| ApiError::not_found("no UI configured"))?;
    let file = confined(&dir, &path).ok_or_else(|| ApiError::not_found("no such file"))?;
    send_file(file).await
}
