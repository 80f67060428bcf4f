use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use kgscout_core::agent::{AgentConfig, Providers};
use kgscout_core::eval::load_dataset_file;
use kgscout_core::llm::{Script, ScriptEntry, ScriptedModel};
use kgscout_core::{Embedder, EvalReport, KnowledgeGraph, ObservationSubgraph, Triple};
use kgscout_service::{router, AppState, AskResponse, EntityReport, Health};
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn tokyo_app(llm: ScriptedModel) -> Router {
    let kg = KnowledgeGraph::load_dir(fixture("tokyo")).unwrap();
    let providers = Providers::new(Arc::new(llm), Embedder::hashed(0, 64).unwrap());
    router(AppState::new(kg, providers, AgentConfig::default()))
}

fn scripted_tokyo() -> Router {
    tokyo_app(ScriptedModel::new(Script::load(fixture("tokyo").join("script.toml")).unwrap()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

#[tokio::test]
async fn health_reports_sizes() {
    let app = scripted_tokyo();
    let (status, body) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let health: Health = serde_json::from_value(body).unwrap();
    assert_eq!(health.status, "ok");
    assert_eq!(health.triples, 13);
    assert_eq!(health.labels, 12);
}

#[tokio::test]
async fn neighbors_and_limits() {
    let app = scripted_tokyo();
    let (status, body) = call(&app, "GET", "/neighbors/Q1490", None).await;
    assert_eq!(status, StatusCode::OK);
    let triples: Vec<Triple> = serde_json::from_value(body).unwrap();
    assert_eq!(triples.len(), 7);
    assert_eq!(triples[0].to_string(), "Q1490\tP31\tQ50337");

    let (_, body) = call(&app, "GET", "/neighbors/Q1490?limit=2", None).await;
    assert_eq!(body.as_array().unwrap().len(), 2);

    let (status, body) = call(&app, "GET", "/neighbors/unknown", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!([]));
}

#[tokio::test]
async fn paths_validate_length() {
    let app = scripted_tokyo();
    let (status, body) = call(&app, "GET", "/paths?from=Q17&to=Q1492&max_len=2", None).await;
    assert_eq!(status, StatusCode::OK);
    let paths: Vec<Vec<Triple>> = serde_json::from_value(body).unwrap();
    assert_eq!(paths.len(), 2);
    assert!(paths.iter().all(|p| p.len() == 2));

    let (status, body) = call(&app, "GET", "/paths?from=Q17&to=Q1492&max_len=9", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("max_len"));

    let (status, _) = call(&app, "GET", "/paths?from=Q17", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn inspect_labels_neighbors() {
    let app = scripted_tokyo();
    let (status, body) = call(&app, "GET", "/entities/Q1492", None).await;
    assert_eq!(status, StatusCode::OK);
    let report: EntityReport = serde_json::from_value(body).unwrap();
    assert_eq!(report.label, "Shinjuku");
    assert_eq!(report.out_degree, 2);
    assert!(report.render().starts_with("Q1492\tShinjuku\tout_degree=2\n"));
}

#[tokio::test]
async fn observe_returns_scored_triples() {
    let app = scripted_tokyo();
    let req = json!({"question": "What is the capital of the prefecture Tokyo?", "entities": ["Q1490"]});
    let (status, body) = call(&app, "POST", "/observe", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    let sub: ObservationSubgraph = serde_json::from_value(body).unwrap();
    assert!(sub.contains(&Triple::parse("Q1490", "P36", "Q1492").unwrap()));

    let bad = json!({"question": "q", "entities": ["Q1490"], "params": {"depth_limit": 0}});
    let (status, _) = call(&app, "POST", "/observe", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _) = call(&app, "POST", "/observe", Some(json!({"question": "q", "entities": []}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn ask_replays_the_script() {
    let app = scripted_tokyo();
    let req = json!({"question": "What is the capital of the prefecture Tokyo?", "entities": ["Q1490"]});
    let (status, body) = call(&app, "POST", "/ask", Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let reply: AskResponse = serde_json::from_value(body).unwrap();
    assert_eq!(reply.answers, vec!["Shinjuku"]);
    assert!(reply.error.is_none());
    assert_eq!(reply.trace.iterations.len(), 2);

    // The consumed script has nothing left, so a second run fails but still
    // reports its partial trace.
    let (status, body) = call(&app, "POST", "/ask", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    let reply: AskResponse = serde_json::from_value(body).unwrap();
    assert!(reply.error.is_some());
    assert!(reply.halted_by.is_none());
    assert_eq!(reply.trace.error, reply.error);
}

#[tokio::test]
async fn ask_rejects_empty_input() {
    let app = scripted_tokyo();
    let (status, _) = call(&app, "POST", "/ask", Some(json!({"question": " ", "entities": ["Q1490"]}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/ask", Some(json!({"question": "q", "entities": []}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/ask", Some(json!({"question": "q"}))).await;
    assert!(status.is_client_error());
}

#[tokio::test]
async fn eval_scores_a_dataset() {
    let app = tokyo_app(ScriptedModel::stateless(vec![
        ScriptEntry::substring("Agent Instructions:", "Action: Answer"),
        ScriptEntry::substring("reference memory", "Shinjuku"),
    ]));
    let mut records = load_dataset_file(fixture("tokyo").join("dataset.jsonl")).unwrap();
    let mut miss = records[0].clone();
    miss.answers = vec!["Kyoto".into()];
    records.push(miss);
    let req = json!({"records": records, "workers": 2, "strategy": "similarity"});
    let (status, body) = call(&app, "POST", "/eval", Some(req)).await;
    assert_eq!(status, StatusCode::OK);
    let report: EvalReport = serde_json::from_value(body).unwrap();
    assert_eq!((report.total, report.hits), (2, 1));
    assert_eq!(report.accuracy, 0.5);
    assert_eq!(report.strategy.as_str(), "similarity");

    let bad = json!({"records": [{"question": "q", "entities": [], "answers": ["a"]}]});
    let (status, body) = call(&app, "POST", "/eval", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().starts_with("record 0"));
}
