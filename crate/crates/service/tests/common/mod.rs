#![allow(dead_code)]

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body, Bytes};
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use pme_core::backend::{Backend, BackendInfo, Generation, RunOptions, StepHook};
use pme_core::{LatentImage, MixSchedule, PromptSpec, RgbImage, SyntheticBackend, Tokenizer};
use pme_service::{router, AppState, ServiceBuilder, ServiceConfig};
use serde_json::Value;
use tower::ServiceExt;

pub const PROMPT: &str = "A basket on a table next to a mug";

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub bytes: Bytes,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes)
            .unwrap_or_else(|e| panic!("not JSON ({e}): {}", String::from_utf8_lossy(&self.bytes)))
    }
}

pub fn build(root: &std::path::Path, max_pending: usize, backend: Arc<dyn Backend>) -> AppState {
    let config = ServiceConfig {
        root: root.to_path_buf(),
        max_pending_jobs: max_pending,
        ..ServiceConfig::default()
    };
    ServiceBuilder::new(config)
        .backend("synthetic", backend)
        .build()
        .unwrap()
}

pub fn app(root: &std::path::Path) -> Router {
    router(build(root, 16, Arc::new(SyntheticBackend::default())))
}

pub async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
    key: Option<&str>,
) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(k) = key {
        req = req.header("Idempotency-Key", k);
    }
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    Reply {
        status,
        headers,
        bytes,
    }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    call(app, Method::GET, uri, None, None).await
}

pub async fn post(app: &Router, uri: &str, body: Value) -> Reply {
    call(app, Method::POST, uri, Some(body), None).await
}

pub async fn create_session(app: &Router, seed: u64) -> Value {
    let r = post(
        app,
        "/v1/sessions",
        serde_json::json!({"prompt": PROMPT, "object": "basket", "nouns": ["basket", "table", "mug"], "seed": seed}),
    )
    .await;
    assert_eq!(
        r.status,
        StatusCode::CREATED,
        "{}",
        String::from_utf8_lossy(&r.bytes)
    );
    r.json()
}

/// Polls a job until it leaves the queued and running states.
pub async fn wait_job(app: &Router, session: &str, job: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(300);
    loop {
        let r = get(app, &format!("/v1/sessions/{session}/jobs/{job}")).await;
        assert_eq!(r.status, StatusCode::OK);
        let v = r.json();
        if v["status"] == "done" || v["status"] == "failed" {
            return v;
        }
        assert!(Instant::now() < deadline, "job {job} did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

pub async fn run_job(app: &Router, session: &str, body: Value) -> Value {
    let r = post(app, &format!("/v1/sessions/{session}/variations"), body).await;
    assert_eq!(
        r.status,
        StatusCode::ACCEPTED,
        "{}",
        String::from_utf8_lossy(&r.bytes)
    );
    let job = r.json()["job_id"].as_str().unwrap().to_string();
    wait_job(app, session, &job).await
}

/// Synthetic backend whose hooked runs wait while the gate is closed.
#[derive(Default)]
pub struct GatedBackend {
    inner: SyntheticBackend,
    closed: AtomicBool,
    lock: Mutex<()>,
    opened: Condvar,
}

impl GatedBackend {
    pub fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
    }

    pub fn open(&self) {
        let _g = self.lock.lock().unwrap();
        self.closed.store(false, Ordering::SeqCst);
        self.opened.notify_all();
    }
}

impl Backend for GatedBackend {
    fn describe(&self) -> BackendInfo {
        self.inner.describe()
    }

    fn tokenizer(&self) -> Arc<dyn Tokenizer> {
        self.inner.tokenizer()
    }

    fn run_hooked(
        &self,
        schedule: &MixSchedule,
        hooks: &dyn StepHook,
        options: &RunOptions,
    ) -> pme_core::Result<Generation> {
        let mut g = self.lock.lock().unwrap();
        while self.closed.load(Ordering::SeqCst) {
            g = self.opened.wait(g).unwrap();
        }
        drop(g);
        self.inner.run_hooked(schedule, hooks, options)
    }

    fn invert_external(
        &self,
        latents: &[LatentImage],
        prompt: &PromptSpec,
        total_steps: u32,
        options: &RunOptions,
    ) -> pme_core::Result<Generation> {
        self.inner
            .invert_external(latents, prompt, total_steps, options)
    }

    fn decode(&self, z: &LatentImage) -> pme_core::Result<RgbImage> {
        self.inner.decode(z)
    }
}

/// Checks `value` against a schema of `docs/api.json`, resolving local
/// references. Covers the keywords the document uses.
pub fn conforms(doc: &Value, schema: &Value, value: &Value, at: &str) -> Result<(), String> {
    if let Some(r) = schema.get("$ref").and_then(Value::as_str) {
        let name = r.rsplit('/').next().unwrap();
        return conforms(doc, &doc["components"]["schemas"][name], value, at);
    }
    if let Some(any) = schema.get("anyOf").and_then(Value::as_array) {
        return if any.iter().any(|s| conforms(doc, s, value, at).is_ok()) {
            Ok(())
        } else {
            Err(format!("{at}: matches no alternative"))
        };
    }
    if let Some(all) = schema.get("allOf").and_then(Value::as_array) {
        return all.iter().try_for_each(|s| conforms(doc, s, value, at));
    }
    if let Some(options) = schema.get("enum").and_then(Value::as_array) {
        if !options.contains(value) {
            return Err(format!("{at}: {value} not in {options:?}"));
        }
    }
    if let Some(c) = schema.get("const") {
        if c != value {
            return Err(format!("{at}: expected {c}, got {value}"));
        }
    }
    let ok = match schema.get("type").and_then(Value::as_str) {
        None => true,
        Some("object") => value.is_object(),
        Some("array") => value.is_array(),
        Some("string") => value.is_string(),
        Some("integer") => value.is_u64() || value.is_i64(),
        Some("number") => value.is_number(),
        Some("boolean") => value.is_boolean(),
        Some("null") => value.is_null(),
        Some(other) => return Err(format!("{at}: unsupported type {other}")),
    };
    if !ok {
        return Err(format!("{at}: {value} is not of type {}", schema["type"]));
    }
    if let Some(obj) = value.as_object() {
        for req in schema
            .get("required")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
        {
            let key = req.as_str().unwrap();
            if !obj.contains_key(key) {
                return Err(format!("{at}: missing {key}"));
            }
        }
        if let Some(props) = schema.get("properties").and_then(Value::as_object) {
            for (k, s) in props {
                if let Some(v) = obj.get(k) {
                    conforms(doc, s, v, &format!("{at}.{k}"))?;
                }
            }
        }
    }
    if let (Some(items), Some(arr)) = (schema.get("items"), value.as_array()) {
        for (i, v) in arr.iter().enumerate() {
            conforms(doc, items, v, &format!("{at}[{i}]"))?;
        }
    }
    Ok(())
}

pub fn api_doc() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/api.json");
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Asserts that a response matches the schema the document gives for
/// `operation` and the response's status code.
pub fn assert_contract(doc: &Value, operation: &str, reply: &Reply) {
    let op = doc["paths"]
        .as_object()
        .unwrap()
        .values()
        .flat_map(|p| p.as_object().unwrap().values())
        .find(|o| o["operationId"] == operation)
        .unwrap_or_else(|| panic!("operation {operation} is not documented"));
    let documented = &op["responses"][reply.status.as_str()];
    assert!(
        !documented.is_null(),
        "{operation} does not document status {}",
        reply.status
    );
    if let Some(schema) = documented.pointer("/content/application~1json/schema") {
        conforms(doc, schema, &reply.json(), operation).unwrap();
    }
}
