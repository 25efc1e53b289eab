//! HTTP routes against the tiny fixture, driven in-process.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use lensflow_cli::service::{router, AppState, TRACE_CACHE_SIZE};
use lensflow_core::graph::{parse_graph, NodeKind, PruneConfig};
use lensflow_core::{load_model_bundle, ModelBundle};
use serde_json::{json, Value};
use tower::ServiceExt;

const JAPAN: &str = "The capital of Japan is the city of";
const IOI: &str = "When Mary and John went to the store, John gave a drink to";

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/tiny-gpt2")
}

fn bundle() -> ModelBundle {
    static BUNDLE: OnceLock<ModelBundle> = OnceLock::new();
    BUNDLE.get_or_init(|| load_model_bundle(&fixture()).unwrap()).clone()
}

fn state() -> Arc<AppState> {
    Arc::new(AppState::new(bundle(), PruneConfig::default()))
}

fn app() -> Router {
    router(state(), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn health_and_model() {
    let app = app();
    let (s, b) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(json_of(&b), json!({"status": "ok"}));
    let (s, b) = call(&app, "GET", "/api/model", None).await;
    assert_eq!(s, StatusCode::OK);
    let v = json_of(&b);
    assert_eq!(v["model"]["n_layers"], 2);
    assert_eq!(v["model"]["max_positions"], 64);
    assert_eq!(v["default_prune"]["keep_kv_per_head"], 2);
}

#[tokio::test]
async fn errors_have_status_and_message() {
    let app = app();
    for body in ["{}", "not json", r#"{"prompt": 3}"#, r#"{"prompt": "hi", "extra": 1}"#, r#"{"prompt": ""}"#] {
        let (s, b) = call(&app, "POST", "/api/graph", Some(body)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}");
        assert!(json_of(&b)["error"].as_str().is_some_and(|m| !m.is_empty()));
    }
    let bad = [
        json!({"prompt": JAPAN, "target": " Tokyo Tower"}),
        json!({"prompt": JAPAN, "layers": "1..9"}),
        json!({"prompt": JAPAN, "layers": "x"}),
        json!({"prompt": JAPAN, "prune": {"keep_kv_per_head": "two"}}),
    ];
    for body in bad {
        let (s, _) = call(&app, "POST", "/api/graph", Some(&body.to_string())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}");
    }
    let long = "word ".repeat(100);
    let (s, b) = call(&app, "POST", "/api/graph", Some(&json!({"prompt": long}).to_string())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(json_of(&b)["error"].as_str().unwrap().contains("at most 64"));

    let (s, b) = call(&app, "GET", "/api/nothing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(json_of(&b)["error"].is_string());
    let (s, _) = call(&app, "GET", "/elsewhere", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/api/graph", None).await;
    assert_eq!(s, StatusCode::METHOD_NOT_ALLOWED);
}

#[tokio::test]
async fn graph_targets_the_prediction() {
    let app = app();
    let b = bundle();
    let ids = b.tokenizer().encode(IOI);
    let trace = lensflow_core::forward(&b, &ids).unwrap();
    let predicted = b.tokenizer().decode(&[trace.predicted_token()]).unwrap();
    let body = json!({"prompt": IOI, "target": predicted}).to_string();
    let (s, bytes) = call(&app, "POST", "/api/graph", Some(&body)).await;
    assert_eq!(s, StatusCode::OK);
    let g = parse_graph(std::str::from_utf8(&bytes).unwrap()).unwrap();
    let last = g.node("1:residual_after_mlp").unwrap();
    assert_eq!(last.target_rank, Some(0));
    assert_eq!(last.color_bin, 0);
}

#[tokio::test]
async fn prune_settings_and_layers_apply() {
    let app = app();
    let body = json!({"prompt": JAPAN, "layers": [1, 2], "prune": {"keep_kv_per_head": 0}}).to_string();
    let (s, bytes) = call(&app, "POST", "/api/graph", Some(&body)).await;
    assert_eq!(s, StatusCode::OK);
    let g = parse_graph(std::str::from_utf8(&bytes).unwrap()).unwrap();
    assert!(g.nodes.iter().all(|n| n.layer == 1));
    assert_eq!(g.nodes_of(NodeKind::MemoryValue).count(), 0);
    assert_eq!(g.nodes_of(NodeKind::HeadOutput).count(), 4);
    assert_eq!(g.nodes_of(NodeKind::WoNeuron).count(), 10);
}

#[tokio::test]
async fn api_and_cli_emit_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.json");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_lensflow"))
        .args(["graph", "--prompt", JAPAN, "--target", " Tokyo", "--layers", "0..2", "--keep-mlp", "4", "--out"])
        .arg(&out)
        .arg("--model")
        .arg(fixture())
        .env_remove("LENSFLOW_CONFIG")
        .status()
        .unwrap();
    assert!(status.success());
    let body = json!({"prompt": JAPAN, "target": " Tokyo", "layers": "0..2", "prune": {"keep_mlp_neurons": 4}});
    let (s, bytes) = call(&app(), "POST", "/api/graph", Some(&body.to_string())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(bytes, std::fs::read(&out).unwrap());
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let state = state();
    let app = router(state.clone(), None);
    let body = json!({"prompt": JAPAN, "target": " Tokyo"}).to_string();
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let (app, body) = (app.clone(), body.clone());
            tokio::spawn(async move { call(&app, "POST", "/api/graph", Some(&body)).await })
        })
        .collect();
    let mut bodies = Vec::new();
    for t in tasks {
        let (s, b) = t.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        bodies.push(b);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
    assert_eq!(state.cache.len(), 1);
}

#[tokio::test]
async fn trace_cache_is_bounded() {
    let state = state();
    let app = router(state.clone(), None);
    for i in 0..TRACE_CACHE_SIZE + 3 {
        let body = json!({"prompt": format!("prompt number {i}"), "layer": 0, "node_kind": "block_input"}).to_string();
        let (s, _) = call(&app, "POST", "/api/lens", Some(&body)).await;
        assert_eq!(s, StatusCode::OK);
    }
    assert_eq!(state.cache.len(), TRACE_CACHE_SIZE);
    assert!(state.cache.get("prompt number 0").is_none());
    assert!(state.cache.get(&format!("prompt number {}", TRACE_CACHE_SIZE + 2)).is_some());
}

#[tokio::test]
async fn lens_projects_graph_nodes() {
    let app = app();
    let graph_body = json!({"prompt": JAPAN, "target": " Tokyo"}).to_string();
    let (_, bytes) = call(&app, "POST", "/api/graph", Some(&graph_body)).await;
    let g = parse_graph(std::str::from_utf8(&bytes).unwrap()).unwrap();
    let tokyo = bundle().tokenizer().token_id(" Tokyo").unwrap();
    for node in g.nodes.iter().filter(|n| n.layer == 1).take(40) {
        let (layer, kind, indices) = lensflow_core::graph::parse_node_id(&node.id).unwrap();
        let body = json!({
            "prompt": JAPAN, "layer": layer, "node_kind": kind.as_str(), "indices": indices, "k": 5, "target": " Tokyo"
        });
        let (s, b) = call(&app, "POST", "/api/lens", Some(&body.to_string())).await;
        assert_eq!(s, StatusCode::OK, "{}", node.id);
        let v = json_of(&b);
        assert_eq!(v["top_k"].as_array().unwrap().len(), 5);
        assert_eq!(v["probs"].as_array().unwrap().len(), 50257);
        assert_eq!(v["target"]["id"], tokyo);
        assert_eq!(v["target"]["rank"].as_u64().map(|r| r as usize), node.target_rank, "{}", node.id);
    }
    let bad = [
        json!({"prompt": JAPAN, "layer": 0, "node_kind": "spaceship"}),
        json!({"prompt": JAPAN, "layer": 5, "node_kind": "block_input"}),
        json!({"prompt": JAPAN, "layer": 0, "node_kind": "head_output", "indices": [9]}),
        json!({"prompt": JAPAN, "layer": 0, "node_kind": "head_output"}),
        json!({"prompt": JAPAN, "layer": 0, "node_kind": "block_input", "k": 0}),
        json!({"layer": 0, "node_kind": "block_input"}),
    ];
    for body in bad {
        let (s, _) = call(&app, "POST", "/api/lens", Some(&body.to_string())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body}");
    }
}

#[tokio::test]
async fn static_assets_are_served_beside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<!doctype html><title>viewer</title>").unwrap();
    let app = router(state(), Some(dir.path().to_path_buf()));
    let (s, b) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(String::from_utf8(b).unwrap().contains("viewer"));
    let (s, _) = call(&app, "GET", "/missing.js", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
}
