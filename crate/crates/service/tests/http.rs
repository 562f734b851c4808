//! HTTP contract tests against an in-process server.

use std::net::SocketAddr;
use std::sync::{Arc, OnceLock};

use serde_json::{json, Value};
use sourceconf_service::config::ServiceConfig;
use sourceconf_service::server::{router, AppState, HealthResponse, Loaded, TranslateResponse};
use sourceconf_core::checkpoint::Checkpoint;
use sourceconf_core::suggestions::{build_index, SuggestionIndex};
use sourceconf_core::synthetic::{generate, SyntheticConfig};
use sourceconf_core::train::{train_model, TrainConfig};
use sourceconf_core::Execution;

struct Fixture {
    checkpoint: Arc<Checkpoint>,
    index: Arc<SuggestionIndex>,
    sentence: String,
}

fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let cfg = SyntheticConfig {
            train_pairs: 400,
            test_sentences: 5,
            train: TrainConfig { vocab_size: 300, epochs: 2, batch_size: 16, warmup_steps: 10, ..Default::default() },
            ..Default::default()
        };
        let data = generate(&cfg).unwrap();
        let (checkpoint, _) = train_model(&data.train, &cfg.train, Execution::Parallel).unwrap();
        let sources: Vec<&str> = data.train.iter().map(|p| p.source.as_str()).collect();
        let index = build_index(&sources, &checkpoint, 10).unwrap();
        Fixture { checkpoint: Arc::new(checkpoint), index: Arc::new(index), sentence: data.train[0].source.clone() }
    })
}

fn loaded(model: bool, index: bool) -> Loaded {
    let f = fixture();
    Loaded {
        checkpoint_id: model.then(|| f.checkpoint.id()),
        checkpoint: model.then(|| f.checkpoint.clone()),
        index_id: index.then(|| f.index.id()),
        index: index.then(|| f.index.clone()),
    }
}

async fn start(config: ServiceConfig, loaded: Loaded, threshold: f64) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(Arc::new(AppState::new(config, loaded, threshold)));
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

async fn post(addr: SocketAddr, path: &str, body: Value) -> (u16, Value) {
    let resp = reqwest::Client::new().post(format!("http://{addr}{path}")).json(&body).send().await.unwrap();
    let status = resp.status().as_u16();
    (status, resp.json().await.unwrap())
}

async fn full(threshold: f64) -> SocketAddr {
    start(ServiceConfig::default(), loaded(true, true), threshold).await
}

#[tokio::test]
async fn translate_is_consistent_and_deterministic() {
    let addr = full(0.01).await;
    let text = fixture().sentence.clone();
    let (status, first) = post(addr, "/translate", json!({ "text": text })).await;
    assert_eq!(status, 200, "{first}");
    let parsed: TranslateResponse = serde_json::from_value(first.clone()).unwrap();
    assert_eq!(parsed.v, 1);
    assert_eq!(parsed.threshold, 0.01);
    assert_eq!(parsed.model_id, fixture().checkpoint.id());
    let words = fixture().checkpoint.tokenize(&text).unwrap().surface_words;
    assert_eq!(parsed.source_words.iter().map(|w| w.text.clone()).collect::<Vec<_>>(), words);
    for w in &parsed.source_words {
        assert!(w.uncertainty.is_finite() && w.uncertainty >= 0.0);
        assert_eq!(w.highlighted, w.uncertainty > parsed.threshold);
    }
    let (_, second) = post(addr, "/translate", json!({ "text": text })).await;
    let strip = |mut v: Value| {
        v.as_object_mut().unwrap().remove("timing_ms");
        v
    };
    assert_eq!(strip(first), strip(second));
}

#[tokio::test]
async fn translate_rejects_bad_input() {
    let config = ServiceConfig { max_input_chars: 20, ..Default::default() };
    let addr = start(config, loaded(true, true), 0.0).await;
    for body in [json!({ "text": "" }), json!({ "text": "   " }), json!({ "text": "x".repeat(21) }), json!({ "txt": "a" })] {
        let (status, err) = post(addr, "/translate", body.clone()).await;
        assert_eq!(status, 400, "{body} -> {err}");
        assert_eq!(err["v"], 1);
        assert!(err["error"].as_str().is_some_and(|s| !s.is_empty()));
    }
    let resp = reqwest::Client::new()
        .post(format!("http://{addr}/translate"))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);
}

#[tokio::test]
async fn missing_model_is_unavailable() {
    let addr = start(ServiceConfig::default(), loaded(false, false), 0.0).await;
    let (status, _) = post(addr, "/translate", json!({ "text": "pa ki" })).await;
    assert_eq!(status, 503);
    let (status, _) = post(addr, "/suggestions", json!({ "text": "pa ki", "word_index": 0 })).await;
    assert_eq!(status, 503);
}

#[tokio::test]
async fn suggestions_contract() {
    let addr = full(0.0).await;
    let text = fixture().sentence.clone();
    let (status, list) = post(addr, "/suggestions", json!({ "text": text, "word_index": 0 })).await;
    assert_eq!(status, 200, "{list}");
    let items = list["suggestions"].as_array().unwrap();
    assert_eq!(items.len(), 5);
    let word = list["word"].as_str().unwrap().to_lowercase();
    assert!(items.iter().all(|s| s["word"].as_str().unwrap().to_lowercase() != word));
    let scores: Vec<f64> = items.iter().map(|s| s["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    let (status, list) = post(addr, "/suggestions", json!({ "text": text, "word_index": 0, "k": 2 })).await;
    assert_eq!((status, list["suggestions"].as_array().unwrap().len()), (200, 2));
    let (status, _) = post(addr, "/suggestions", json!({ "text": text, "word_index": 0, "k": 0 })).await;
    assert_eq!(status, 400);
    let (status, _) = post(addr, "/suggestions", json!({ "text": text, "word_index": 999 })).await;
    assert_eq!(status, 400);
}

#[tokio::test]
async fn health_reflects_loaded_artifacts() {
    let addr = full(0.0).await;
    let get = |addr: SocketAddr| async move {
        let resp = reqwest::get(format!("http://{addr}/health")).await.unwrap();
        (resp.status().as_u16(), resp.json::<HealthResponse>().await.unwrap())
    };
    let answers = concurrent(get, addr).await;
    assert!(answers.iter().all(|a| a == &answers[0]));
    let (status, body) = &answers[0];
    assert_eq!(*status, 200);
    assert_eq!(body.status, "ok");
    assert_eq!(body.model_id.as_deref(), Some(fixture().checkpoint.id().as_str()));
    assert_eq!(body.index_id.as_deref(), Some(fixture().index.id().as_str()));

    let partial = start(ServiceConfig::default(), loaded(true, false), 0.0).await;
    let (status, body) = get(partial).await;
    assert_eq!(status, 503);
    assert_eq!(body.index_id, None);
}

/// Eight simultaneous calls of `get`.
async fn concurrent<F, Fut>(get: F, addr: SocketAddr) -> Vec<(u16, HealthResponse)>
where
    F: Fn(SocketAddr) -> Fut,
    Fut: std::future::Future<Output = (u16, HealthResponse)> + Send + 'static,
{
    let handles: Vec<_> = (0..8).map(|_| tokio::spawn(get(addr))).collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test]
async fn cors_allows_browser_origin() {
    let config = ServiceConfig { cors_origins: vec!["http://localhost:5173".into()], ..Default::default() };
    let addr = start(config, loaded(true, true), 0.0).await;
    let resp = reqwest::Client::new()
        .get(format!("http://{addr}/health"))
        .header("origin", "http://localhost:5173")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
}
