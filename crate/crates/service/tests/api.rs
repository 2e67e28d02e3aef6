mod common;

use std::sync::Arc;

use axum::http::{Method, StatusCode};
use common::*;
use pme_core::proxy::{
    build_token_index, find_proxies, FakeEmbedder, DEFAULT_CANDIDATES, DEFAULT_TEMPLATE,
};
use pme_core::{PromptSpec, SyntheticBackend, WordTokenizer};
use pme_service::{router, ServiceBuilder, ServiceConfig, REPLAYED_HEADER};
use serde_json::json;

#[tokio::test(flavor = "multi_thread")]
async fn identity_proxy_through_the_api_reproduces_the_reference() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let doc = api_doc();
    let created = post(
        &app,
        "/v1/sessions",
        json!({"prompt": PROMPT, "object": "basket", "nouns": ["basket", "table", "mug"], "seed": 5}),
    )
    .await;
    assert_eq!(created.status, StatusCode::CREATED);
    assert_contract(&doc, "createSession", &created);
    let session = created.json();
    let id = session["session_id"].as_str().unwrap();
    assert_eq!(session["object"]["word"], "basket");

    let accepted = post(
        &app,
        &format!("/v1/sessions/{id}/variations"),
        json!({"proxies": ["basket", "bowl"]}),
    )
    .await;
    assert_eq!(accepted.status, StatusCode::ACCEPTED);
    assert_contract(&doc, "createVariations", &accepted);
    let job_id = accepted.json()["job_id"].as_str().unwrap().to_string();
    wait_job(&app, id, &job_id).await;
    let job = get(&app, &format!("/v1/sessions/{id}/jobs/{job_id}")).await;
    assert_contract(&doc, "getJob", &job);
    let job = job.json();
    assert_eq!(job["status"], "done", "{job}");
    let gallery = job["gallery"].as_array().unwrap();
    assert_eq!(gallery.len(), 2);
    assert_eq!(gallery[0]["id"], "n0-v0");
    assert_eq!(gallery[1]["id"], "n0-v1");

    let reference = get(&app, session["reference_image"].as_str().unwrap()).await;
    assert_eq!(reference.status, StatusCode::OK);
    assert_eq!(reference.headers["content-type"], "image/png");
    let identity = get(&app, gallery[0]["image"].as_str().unwrap()).await;
    assert_eq!(identity.status, StatusCode::OK);
    assert!(
        identity.bytes == reference.bytes,
        "identity variation differs from the reference"
    );
    let other = get(&app, gallery[1]["image"].as_str().unwrap()).await;
    assert!(other.bytes != reference.bytes);
    for mask in ["retention", "segmentation", "object"] {
        let url = gallery[1]["masks"][mask].as_str().unwrap();
        assert_eq!(get(&app, url).await.status, StatusCode::OK, "{mask}");
    }

    for (op, uri) in [
        ("getTree", format!("/v1/sessions/{id}/tree")),
        ("getSession", format!("/v1/sessions/{id}")),
        ("getNode", format!("/v1/sessions/{id}/nodes/0")),
        ("listJobs", format!("/v1/sessions/{id}/jobs")),
        ("listSessions", "/v1/sessions".to_string()),
        ("health", "/v1/health".to_string()),
        ("listBackends", "/v1/backends".to_string()),
    ] {
        let r = get(&app, &uri).await;
        assert_eq!(r.status, StatusCode::OK, "{uri}");
        assert_contract(&doc, op, &r);
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn unknown_ids_are_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let doc = api_doc();
    let session = create_session(&app, 1).await;
    let id = session["session_id"].as_str().unwrap();

    let r = post(
        &app,
        &format!("/v1/sessions/{id}/select"),
        json!({"variation_id": "n0-v9"}),
    )
    .await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_contract(&doc, "select", &r);
    assert_eq!(r.json()["error"]["kind"], "not_found");

    for uri in [
        "/v1/sessions/nope".to_string(),
        "/v1/sessions/nope/tree".to_string(),
        format!("/v1/sessions/{id}/jobs/j7"),
        format!("/v1/sessions/{id}/nodes/3"),
        format!("/v1/artifacts/{id}/missing.png"),
        format!("/v1/artifacts/{id}/..%2F..%2Fsessions%2F{id}%2Fmanifest.json"),
        format!("/v1/artifacts/{id}/../../sessions/{id}/manifest.json"),
        "/v1/no/such/route".to_string(),
    ] {
        assert_eq!(get(&app, &uri).await.status, StatusCode::NOT_FOUND, "{uri}");
    }
    let r = post(
        &app,
        "/v1/sessions/nope/variations",
        json!({"proxies": ["bowl"]}),
    )
    .await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = post(
        &app,
        &format!("/v1/sessions/{id}/checkout"),
        json!({"node": 4}),
    )
    .await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_contract(&doc, "checkout", &r);
}

#[tokio::test(flavor = "multi_thread")]
async fn invalid_requests_are_unprocessable() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let doc = api_doc();
    let session = create_session(&app, 2).await;
    let id = session["session_id"].as_str().unwrap();
    let variations = format!("/v1/sessions/{id}/variations");
    for body in [
        json!({"proxies": ["bowl"], "options": {"t3": 10, "t2": 20}}),
        json!({"proxies": ["bowl"], "options": {"t1": 0}}),
        json!({"proxies": ["bowl"], "options": {"t1": 80}}),
        json!({"proxies": ["bowl"], "object": "next"}),
        json!({"proxies": ["bowl"], "object": "giraffe"}),
        json!({"proxies": [""]}),
        json!({}),
        json!({"proxies": ["bowl"], "auto": 3}),
        json!({"auto": 3}),
        json!({"proxies": ["bowl"], "colour": "red"}),
        json!({"proxies": "bowl"}),
    ] {
        let r = post(&app, &variations, body.clone()).await;
        assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert_contract(&doc, "createVariations", &r);
    }
    let r = call(&app, Method::POST, &variations, None, None).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    for body in [
        json!({"prompt": PROMPT, "object": "giraffe"}),
        json!({"prompt": PROMPT, "object": "basket", "backend": "nope"}),
        json!({"prompt": PROMPT, "object": "basket", "steps": 0}),
        json!({"object": "basket"}),
    ] {
        let r = post(&app, "/v1/sessions", body.clone()).await;
        assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert_contract(&doc, "createSession", &r);
    }
    assert_eq!(
        get(&app, "/v1/sessions").await.json()["sessions"]
            .as_array()
            .unwrap()
            .len(),
        1
    );
}

#[tokio::test(flavor = "multi_thread")]
async fn two_jobs_complete_and_the_tree_changes_only_on_select() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let session = create_session(&app, 3).await;
    let id = session["session_id"].as_str().unwrap();
    let tree_uri = format!("/v1/sessions/{id}/tree");
    let before = get(&app, &tree_uri).await.bytes;

    let variations = format!("/v1/sessions/{id}/variations");
    let a = post(&app, &variations, json!({"proxies": ["bowl", "crate"]})).await;
    let b = post(&app, &variations, json!({"proxies": ["box"]})).await;
    assert_eq!(
        (a.status, b.status),
        (StatusCode::ACCEPTED, StatusCode::ACCEPTED)
    );
    let (a, b) = (a.json(), b.json());
    assert_ne!(a["job_id"], b["job_id"]);
    let ja = wait_job(&app, id, a["job_id"].as_str().unwrap()).await;
    let jb = wait_job(&app, id, b["job_id"].as_str().unwrap()).await;
    assert_eq!(
        (ja["status"].as_str(), jb["status"].as_str()),
        (Some("done"), Some("done"))
    );
    assert_eq!(
        get(&app, &tree_uri).await.bytes,
        before,
        "tree changed before select"
    );

    let mut ids: Vec<String> = [&ja, &jb]
        .iter()
        .flat_map(|j| {
            j["gallery"]
                .as_array()
                .unwrap()
                .iter()
                .map(|g| g["id"].as_str().unwrap().to_string())
        })
        .collect();
    ids.sort();
    assert_eq!(ids, ["n0-v0", "n0-v1", "n0-v2"]);
    let node = get(&app, &format!("/v1/sessions/{id}/nodes/0"))
        .await
        .json();
    assert_eq!(node["gallery"].as_array().unwrap().len(), 3);

    let picked = &jb["gallery"][0]["id"];
    let r = post(
        &app,
        &format!("/v1/sessions/{id}/select"),
        json!({"variation_id": picked, "object": "mug"}),
    )
    .await;
    assert_eq!(
        r.status,
        StatusCode::CREATED,
        "{}",
        String::from_utf8_lossy(&r.bytes)
    );
    assert_contract(&api_doc(), "select", &r);
    let sel = r.json();
    assert_eq!(sel["node"], 1);
    assert_eq!(sel["focus"]["word"], "mug");

    let tree = get(&app, &tree_uri).await.json();
    assert_eq!(tree["depth"], 1);
    assert_eq!(tree["current"], 1);
    assert_eq!(tree["nodes"][1]["parent"], 0);
    assert_eq!(tree["nodes"][1]["produced_by"]["proxy"], "box");
    // Mix-and-Match ends on the base prompt, so the new node keeps its text.
    assert_eq!(tree["nodes"][1]["prompt"], PROMPT);
    assert_eq!(tree["nodes"][0]["children"], json!([1]));

    // The second noun is varied from the new node; the focus is its default object.
    let j = run_job(&app, id, json!({"proxies": ["cup"]})).await;
    assert_eq!(j["status"], "done", "{j}");
    assert_eq!(j["node"], 1);
    assert_eq!(j["gallery"][0]["id"], "n1-v0");
    let r = post(
        &app,
        &format!("/v1/sessions/{id}/select"),
        json!({"variation_id": "n1-v0"}),
    )
    .await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert_eq!(get(&app, &tree_uri).await.json()["depth"], 2);
}

#[tokio::test(flavor = "multi_thread")]
async fn conflicting_mutations_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let session = create_session(&app, 4).await;
    let id = session["session_id"].as_str().unwrap();
    let j = run_job(&app, id, json!({"proxies": ["bowl", "crate"]})).await;
    assert_eq!(j["status"], "done");
    let select = format!("/v1/sessions/{id}/select");

    let r = post(
        &app,
        &select,
        json!({"variation_id": "n0-v0", "expected_current": 3}),
    )
    .await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    let r = post(
        &app,
        &select,
        json!({"variation_id": "n0-v0", "expected_current": 0}),
    )
    .await;
    assert_eq!(r.status, StatusCode::CREATED);
    // n0-v1 belongs to node 0, which is no longer current.
    let r = post(&app, &select, json!({"variation_id": "n0-v1"})).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_contract(&api_doc(), "select", &r);

    let checkout = format!("/v1/sessions/{id}/checkout");
    let r = post(&app, &checkout, json!({"node": 0, "expected_current": 0})).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    let r = post(&app, &checkout, json!({"node": 0, "expected_current": 1})).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_contract(&api_doc(), "checkout", &r);
    // Back on node 0, a sibling of node 1 can be created.
    let r = post(&app, &select, json!({"variation_id": "n0-v1"})).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let tree = get(&app, &format!("/v1/sessions/{id}/tree")).await.json();
    assert_eq!(tree["nodes"][0]["children"], json!([1, 2]));
    assert_eq!(tree["depth"], 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn idempotency_keys_replay_the_first_response() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let body = json!({"prompt": PROMPT, "object": "basket", "seed": 6});
    let first = call(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(body.clone()),
        Some("create-1"),
    )
    .await;
    let again = call(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(body.clone()),
        Some("create-1"),
    )
    .await;
    assert_eq!(first.status, StatusCode::CREATED);
    assert_eq!(again.status, StatusCode::CREATED);
    assert_eq!(first.json(), again.json());
    assert!(first.headers.get(REPLAYED_HEADER).is_none());
    assert_eq!(again.headers[REPLAYED_HEADER], "true");
    assert_eq!(
        get(&app, "/v1/sessions").await.json()["sessions"]
            .as_array()
            .unwrap()
            .len(),
        1
    );

    let other = json!({"prompt": PROMPT, "object": "mug", "seed": 6});
    let r = call(
        &app,
        Method::POST,
        "/v1/sessions",
        Some(other),
        Some("create-1"),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let id = first.json()["session_id"].as_str().unwrap().to_string();
    let variations = format!("/v1/sessions/{id}/variations");
    let body = json!({"proxies": ["bowl"]});
    let a = call(
        &app,
        Method::POST,
        &variations,
        Some(body.clone()),
        Some("vary-1"),
    )
    .await;
    let b = call(
        &app,
        Method::POST,
        &variations,
        Some(body.clone()),
        Some("vary-1"),
    )
    .await;
    assert_eq!(
        (a.status, b.status),
        (StatusCode::ACCEPTED, StatusCode::ACCEPTED)
    );
    assert_eq!(a.json()["job_id"], b.json()["job_id"]);
    wait_job(&app, &id, a.json()["job_id"].as_str().unwrap()).await;
    assert_eq!(
        get(&app, &format!("/v1/sessions/{id}/jobs")).await.json()["jobs"]
            .as_array()
            .unwrap()
            .len(),
        1
    );

    let select = format!("/v1/sessions/{id}/select");
    let s1 = call(
        &app,
        Method::POST,
        &select,
        Some(json!({"variation_id": "n0-v0"})),
        Some("sel-1"),
    )
    .await;
    let s2 = call(
        &app,
        Method::POST,
        &select,
        Some(json!({"variation_id": "n0-v0"})),
        Some("sel-1"),
    )
    .await;
    assert_eq!(
        (s1.status, s2.status),
        (StatusCode::CREATED, StatusCode::CREATED)
    );
    assert_eq!(s1.json(), s2.json());
    assert_eq!(
        get(&app, &format!("/v1/sessions/{id}/tree")).await.json()["nodes"]
            .as_array()
            .unwrap()
            .len(),
        2
    );
    // Without a key the same select is a new mutation, and node 0's variation is no longer selectable.
    let s3 = post(&app, &select, json!({"variation_id": "n0-v0"})).await;
    assert_eq!(s3.status, StatusCode::CONFLICT);
}

#[tokio::test(flavor = "multi_thread")]
async fn saturated_backend_answers_503() {
    let dir = tempfile::tempdir().unwrap();
    let backend = Arc::new(GatedBackend::default());
    let app = router(build(dir.path(), 1, backend.clone()));
    let session = create_session(&app, 7).await;
    let id = session["session_id"].as_str().unwrap();
    backend.close();
    let variations = format!("/v1/sessions/{id}/variations");
    let first = post(&app, &variations, json!({"proxies": ["bowl"]})).await;
    assert_eq!(first.status, StatusCode::ACCEPTED);
    let second = post(&app, &variations, json!({"proxies": ["crate"]})).await;
    assert_eq!(second.status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(second.headers.contains_key("retry-after"));
    assert_contract(&api_doc(), "createVariations", &second);
    assert_eq!(get(&app, "/v1/health").await.json()["pending_jobs"], 1);
    backend.open();
    let job = wait_job(&app, id, first.json()["job_id"].as_str().unwrap()).await;
    assert_eq!(job["status"], "done");
    let third = post(&app, &variations, json!({"proxies": ["crate"]})).await;
    assert_eq!(third.status, StatusCode::ACCEPTED);
    wait_job(&app, id, third.json()["job_id"].as_str().unwrap()).await;
}

#[tokio::test(flavor = "multi_thread")]
async fn state_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (id, tree, node0, job) = {
        let app = app(dir.path());
        let session = create_session(&app, 8).await;
        let id = session["session_id"].as_str().unwrap().to_string();
        let job = run_job(&app, &id, json!({"proxies": ["bowl", "basket"]})).await;
        let r = post(
            &app,
            &format!("/v1/sessions/{id}/select"),
            json!({"variation_id": "n0-v0", "object": "table"}),
        )
        .await;
        assert_eq!(r.status, StatusCode::CREATED);
        let tree = get(&app, &format!("/v1/sessions/{id}/tree")).await.bytes;
        let node0 = get(&app, &format!("/v1/sessions/{id}/nodes/0")).await.bytes;
        (id, tree, node0, job)
    };

    // A job that was running when the process stopped.
    let mut stale: serde_json::Value = job.clone();
    let job_path = dir.path().join(format!("sessions/{id}/jobs/j1.json"));
    let mut record: serde_json::Value = serde_json::from_slice(
        &std::fs::read(dir.path().join(format!("sessions/{id}/jobs/j0.json"))).unwrap(),
    )
    .unwrap();
    record["id"] = json!("j1");
    record["status"] = json!("running");
    record["variations"] = json!([]);
    std::fs::write(&job_path, serde_json::to_vec(&record).unwrap()).unwrap();
    stale["job_id"] = json!("j1");

    let app = app(dir.path());
    assert_eq!(
        get(&app, &format!("/v1/sessions/{id}/tree")).await.bytes,
        tree
    );
    assert_eq!(
        get(&app, &format!("/v1/sessions/{id}/nodes/0")).await.bytes,
        node0
    );
    assert_eq!(
        get(&app, &format!("/v1/sessions/{id}/jobs/j0"))
            .await
            .json(),
        job
    );
    let interrupted = get(&app, &format!("/v1/sessions/{id}/jobs/j1"))
        .await
        .json();
    assert_eq!(interrupted["status"], "failed");
    assert_eq!(interrupted["error"]["kind"], "interrupted");
    let r = get(&app, job["gallery"][1]["image"].as_str().unwrap()).await;
    assert_eq!(r.status, StatusCode::OK);
    // Work continues after the restart with fresh ids.
    let j = run_job(&app, &id, json!({"proxies": ["chair"]})).await;
    assert_eq!(j["job_id"], "j2");
    assert_eq!(j["gallery"][0]["id"], "n1-v0");
    // Repeating a job reproduces its traces, which are stored once.
    let traces = || {
        std::fs::read_dir(dir.path().join("traces"))
            .unwrap()
            .count()
    };
    let before = traces();
    let again = run_job(&app, &id, json!({"proxies": ["chair"]})).await;
    assert_eq!(again["gallery"][0]["trace"], j["gallery"][0]["trace"]);
    assert_eq!(traces(), before);
}

#[tokio::test(flavor = "multi_thread")]
async fn automatic_proxies_come_from_the_embedding_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut embedder = FakeEmbedder::generated(3, 16, 200, &["basket", "hamper", "bucket"]);
    embedder.plant("hamper", "basket", 0.1);
    embedder.plant("bucket", "basket", 0.2);
    let config = ServiceConfig {
        root: dir.path().to_path_buf(),
        ..ServiceConfig::default()
    };
    let prompt = PromptSpec::parse(
        &WordTokenizer,
        PROMPT,
        "basket",
        Some(&["basket", "table", "mug"]),
        &[],
    )
    .unwrap();
    let index = build_token_index(&embedder, DEFAULT_TEMPLATE, None).unwrap();
    let expected: Vec<String> = find_proxies(&index, &embedder, &prompt, DEFAULT_CANDIDATES, 2)
        .unwrap()
        .into_iter()
        .map(|c| c.display)
        .collect();
    assert!(expected.contains(&"hamper".to_string()));
    let state = ServiceBuilder::new(config)
        .backend("synthetic", Arc::new(SyntheticBackend::default()))
        .embedder(Arc::new(embedder))
        .build()
        .unwrap();
    let app = router(state);
    let session = create_session(&app, 9).await;
    let id = session["session_id"].as_str().unwrap();
    let job = run_job(&app, id, json!({"auto": 2})).await;
    assert_eq!(job["status"], "done", "{job}");
    assert_eq!(job["proxies"], json!(expected));
    assert_eq!(job["gallery"].as_array().unwrap().len(), 2);
    let empty = run_job(&app, id, json!({"auto": 0})).await;
    assert_eq!(empty["status"], "done");
    assert_eq!(empty["gallery"], json!([]));
}

#[tokio::test(flavor = "multi_thread")]
async fn every_documented_route_is_served() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let doc = api_doc();
    for (path, ops) in doc["paths"].as_object().unwrap() {
        let uri = path
            .replace("{id}", "s0")
            .replace("{job}", "j0")
            .replace("{node}", "0")
            .replace("{path}", "a.png");
        for method in ops.as_object().unwrap().keys() {
            let method = Method::from_bytes(method.to_uppercase().as_bytes()).unwrap();
            let body = (method == Method::POST).then(|| json!({}));
            let r = call(&app, method.clone(), &uri, body, None).await;
            assert_ne!(r.status, StatusCode::METHOD_NOT_ALLOWED, "{method} {uri}");
            if r.status == StatusCode::NOT_FOUND {
                assert_ne!(
                    r.json()["error"]["message"],
                    "no such route",
                    "{method} {uri}"
                );
            }
        }
    }
}
