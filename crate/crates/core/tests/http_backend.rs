//! HTTP backend against a local fake chat-completions server.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use cinorms::inference::{
    dispatch, BackendSpec, DispatchError, HttpBackend, ModelSpec, PromptItem, RunOptions, SamplingParams,
};
use cinorms::pipeline::{run_pipeline, PipelineError, RunConfig, Stage};
use cinorms::ChatTemplateKind;

/// Authorization header and JSON body of one request.
type Captured = (Option<String>, Value);

/// Replies in order from `script`; the last entry repeats.
#[derive(Clone)]
struct Fake {
    script: Arc<Vec<(u16, String)>>,
    hits: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<Captured>>>,
}

async fn handler(State(f): State<Fake>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, String) {
    let i = f.hits.fetch_add(1, Ordering::SeqCst);
    let auth = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .map(String::from);
    f.bodies.lock().unwrap().push((auth, body));
    let (status, text) = &f.script[i.min(f.script.len() - 1)];
    (StatusCode::from_u16(*status).unwrap(), text.clone())
}

fn ok_body(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

async fn serve(script: Vec<(u16, String)>) -> (String, Fake) {
    let fake = Fake {
        script: Arc::new(script),
        hits: Arc::new(AtomicUsize::new(0)),
        bodies: Arc::new(Mutex::new(Vec::new())),
    };
    let app = Router::new()
        .route("/v1/chat/completions", post(handler))
        .with_state(fake.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}/v1"), fake)
}

fn spec(base_url: &str, env: &str) -> ModelSpec {
    ModelSpec {
        name: "remote".into(),
        capacity_label: String::new(),
        optimization_tags: Default::default(),
        chat_template_kind: ChatTemplateKind::Plain,
        backend: BackendSpec::Http {
            base_url: base_url.into(),
            model_id: "test-model".into(),
            api_key_env: env.into(),
        },
        sampling: SamplingParams::default(),
        variant_ids: None,
    }
}

fn fast_opts(max_retries: u32) -> RunOptions {
    RunOptions {
        max_in_flight: 2,
        max_retries,
        backoff: Duration::from_millis(5),
        request_timeout: Duration::from_secs(5),
    }
}

fn one_prompt() -> Vec<PromptItem> {
    vec![PromptItem {
        vignette_id: "t:s0:r0:a0:t0".into(),
        variant_id: 0,
        wire_text: "rate this".into(),
    }]
}

fn backend(base: &str) -> HttpBackend {
    HttpBackend::new(base, "test-model", "sk-test".into(), SamplingParams::default(), Duration::from_secs(5)).unwrap()
}

#[tokio::test]
async fn rate_limited_twice_then_ok() {
    let (base, fake) = serve(vec![
        (429, "slow down".into()),
        (429, "slow down".into()),
        (200, ok_body("neutral")),
    ])
    .await;
    let s = spec(&base, "UNUSED");
    let out = dispatch(&one_prompt(), &s, &backend(&base), None, &fast_opts(3))
        .await
        .unwrap();
    assert_eq!(out.responses.len(), 1);
    assert_eq!(out.responses[0].attempts, 3);
    assert_eq!(out.responses[0].raw_text, "neutral");
    assert_eq!(out.backend_calls, 3);
    assert_eq!(fake.hits.load(Ordering::SeqCst), 3);

    let bodies = fake.bodies.lock().unwrap();
    let (auth, body) = &bodies[0];
    assert_eq!(auth.as_deref(), Some("Bearer sk-test"));
    assert_eq!(body["model"], "test-model");
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "rate this");
    assert_eq!(body["temperature"], 0.0);
    assert_eq!(body["max_tokens"], 128);
}

#[tokio::test]
async fn unauthorized_is_not_retried() {
    let (base, fake) = serve(vec![(401, "bad key".into())]).await;
    let err = dispatch(&one_prompt(), &spec(&base, "UNUSED"), &backend(&base), None, &fast_opts(3))
        .await
        .unwrap_err();
    assert!(matches!(err, DispatchError::AuthFailure { status: 401 }), "{err}");
    assert_eq!(fake.hits.load(Ordering::SeqCst), 1);
}

#[tokio::test]
async fn persistent_server_error_exhausts_retries() {
    let (base, fake) = serve(vec![(503, "down".into())]).await;
    let err = dispatch(&one_prompt(), &spec(&base, "UNUSED"), &backend(&base), None, &fast_opts(2))
        .await
        .unwrap_err();
    assert!(
        matches!(err, DispatchError::BackendUnreachable { attempts: 3, .. }),
        "{err}"
    );
    assert_eq!(fake.hits.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn malformed_and_rejected_replies() {
    let (base, _) = serve(vec![(200, "{\"nope\": 1}".into())]).await;
    let err = dispatch(&one_prompt(), &spec(&base, "UNUSED"), &backend(&base), None, &fast_opts(3))
        .await
        .unwrap_err();
    assert!(matches!(err, DispatchError::MalformedReply { .. }), "{err}");

    let (base, fake) = serve(vec![(400, "context too long".into())]).await;
    let err = dispatch(&one_prompt(), &spec(&base, "UNUSED"), &backend(&base), None, &fast_opts(3))
        .await
        .unwrap_err();
    assert!(matches!(err, DispatchError::Rejected { status: 400, .. }), "{err}");
    assert_eq!(fake.hits.load(Ordering::SeqCst), 1);
}

fn tiny_catalog(dir: &std::path::Path) -> std::path::PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(
        &p,
        json!({
            "dataset_id": "tiny",
            "subject_phrase": "owner",
            "template": "{sender} records {attribute} which is sent to {recipient} under the following condition: {transmission_principle}",
            "senders": ["a door lock"],
            "recipients": ["its manufacturer"],
            "attributes": ["{subject}'s location", "{subject}'s voice"],
            "transmission_principles": ["if {subject} has given consent"],
            "include_null_tp": false
        })
        .to_string(),
    )
    .unwrap();
    p
}

fn http_config(dir: &std::path::Path, base: &str, env: &str) -> RunConfig {
    let catalog = tiny_catalog(dir);
    let text = json!({
        "catalog_path": catalog,
        "variants_path": concat!(env!("CARGO_MANIFEST_DIR"), "/data/variants.json"),
        "run_opts": {"output_dir": dir.join("out"), "backoff_ms": 5, "max_retries": 3},
        "models": [serde_json::to_value(spec(base, env)).unwrap()]
    })
    .to_string();
    RunConfig::from_json(&text, dir).unwrap()
}

#[tokio::test]
async fn missing_key_fails_before_any_request() {
    let (base, fake) = serve(vec![(200, ok_body("neutral"))]).await;
    let dir = tempfile::tempdir().unwrap();
    let cfg = http_config(dir.path(), &base, "CINORMS_TEST_KEY_THAT_IS_NEVER_SET");
    let err = run_pipeline(cfg, &Stage::ALL).await.unwrap_err();
    assert!(
        matches!(&err, PipelineError::MissingApiKey { var, .. } if var == "CINORMS_TEST_KEY_THAT_IS_NEVER_SET"),
        "{err}"
    );
    assert_eq!(fake.hits.load(Ordering::SeqCst), 0);
    assert!(!dir.path().join("out").join("vignettes.csv").exists());
}

#[tokio::test]
async fn pipeline_over_fake_server() {
    let (base, fake) = serve(vec![(429, "busy".into()), (200, ok_body("The answer is: strongly unacceptable."))]).await;
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var("CINORMS_TEST_KEY_PIPELINE", "sk-pipeline");
    let cfg = http_config(dir.path(), &base, "CINORMS_TEST_KEY_PIPELINE");
    let summary = run_pipeline(cfg.clone(), &Stage::ALL).await.unwrap();
    // 2 vignettes x 11 variants, plus one rate-limited retry
    assert_eq!(summary.backend_calls, 23);
    assert_eq!(fake.hits.load(Ordering::SeqCst), 23);
    let norms = std::fs::read_to_string(dir.path().join("out/norms.csv")).unwrap();
    assert_eq!(norms.lines().filter(|l| l.contains(",consistent,strongly_unacceptable,11,")).count(), 2, "{norms}");

    let again = run_pipeline(cfg, &Stage::ALL).await.unwrap();
    assert_eq!(again.backend_calls, 0);
    assert_eq!(again.cache_hits, 22);
    assert_eq!(fake.hits.load(Ordering::SeqCst), 23);
    assert_eq!(summary.manifest, again.manifest);
}
