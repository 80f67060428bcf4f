use std::path::PathBuf;
use std::sync::Arc;

use kgscout_client::{Client, ClientError};
use kgscout_core::agent::{AgentConfig, Providers};
use kgscout_core::eval::load_dataset_file;
use kgscout_core::llm::{Script, ScriptedModel};
use kgscout_core::{Embedder, EntityId, HaltReason, KnowledgeGraph, ReflectionStrategy};
use kgscout_service::{spawn_local, AppState};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

async fn serve(name: &str) -> Client {
    let dir = fixture(name);
    let kg = KnowledgeGraph::load_dir(&dir).unwrap();
    let llm = ScriptedModel::new(Script::load(dir.join("script.toml")).unwrap());
    let providers = Providers::new(Arc::new(llm), Embedder::hashed(0, 64).unwrap());
    let addr = spawn_local(AppState::new(kg, providers, AgentConfig::default())).await.unwrap();
    Client::new(format!("http://{addr}")).unwrap()
}

fn ids(list: &[&str]) -> Vec<EntityId> {
    list.iter().map(|s| EntityId::new(s).unwrap()).collect()
}

#[tokio::test]
async fn store_queries() {
    let client = serve("jack_london").await;
    let health = client.health().await.unwrap();
    assert_eq!(health.triples, 15);

    let n = client.neighbors("Q1029478", None).await.unwrap();
    assert_eq!(n.len(), 4);
    assert_eq!(client.neighbors("Q1029478", Some(1)).await.unwrap().len(), 1);

    let paths = client.paths("Q45765", "Q16", Some(2)).await.unwrap();
    assert_eq!(paths.len(), 2);

    let report = client.inspect("Q2009", None).await.unwrap();
    assert_eq!(report.label, "Yukon");
    assert_eq!(report.neighbors[0].tail_label, "Canada");
}

#[tokio::test]
async fn ask_matches_local_run() {
    let client = serve("jack_london").await;
    let record = load_dataset_file(fixture("jack_london").join("dataset.jsonl")).unwrap().remove(0);
    let reply = client.ask(&record.question, &record.entities, None).await.unwrap();
    assert_eq!(reply.answers, vec!["Canada", "Yukon"]);
    assert_eq!(reply.halted_by, Some(HaltReason::AnswerAction));

    let stored = std::fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/jack_london.trace.json"),
    )
    .unwrap();
    assert_eq!(reply.trace.to_json(), stored);
}

#[tokio::test]
async fn observe_and_eval() {
    let client = serve("tokyo").await;
    let sub = client
        .observe("What is the capital of the prefecture Tokyo?", &ids(&["Q1490"]), None)
        .await
        .unwrap();
    assert!(!sub.is_empty());

    let records = load_dataset_file(fixture("tokyo").join("dataset.jsonl")).unwrap();
    let report = client.eval(records, Some(ReflectionStrategy::Oda), Some(1)).await.unwrap();
    assert_eq!((report.total, report.hits, report.errors), (1, 1, 0));
}

#[tokio::test]
async fn api_errors_carry_the_message() {
    let client = serve("tokyo").await;
    match client.paths("Q17", "Q1492", Some(50)).await {
        Err(ClientError::Api { status, message }) => {
            assert_eq!(status, 400);
            assert!(message.contains("max_len"), "{message}");
        }
        other => panic!("expected an API error, got {other:?}"),
    }
    assert!(matches!(client.ask("q", &[], None).await, Err(ClientError::Api { status: 400, .. })));
}

#[tokio::test]
async fn ids_are_percent_encoded() {
    let client = serve("tokyo").await;
    let n = client.neighbors("a/b c?d", None).await.unwrap();
    assert!(n.is_empty());
}

#[test]
fn bad_base_urls() {
    assert!(matches!(Client::new("not a url"), Err(ClientError::Url(_))));
    assert!(matches!(Client::new("mailto:x@example.com"), Err(ClientError::Url(_))));
}

#[tokio::test]
async fn unreachable_server() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    let client = Client::new(format!("http://{addr}")).unwrap();
    assert!(matches!(client.health().await, Err(ClientError::Http(_))));
}
