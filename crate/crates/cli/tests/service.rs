mod common;

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use msgt_cli::engine::{ClampSource, ClampTarget, PredictionResponse};
use msgt_cli::service::{cors, router};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> Router {
    router(Arc::new(common::engine()), cors(None).unwrap())
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, uri, Some(&body.to_string())).await
}

fn response(v: Value) -> PredictionResponse {
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn health_concepts_samples() {
    let app = app();
    let (s, health) = call(&app, Method::GET, "/api/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(health["status"], "ok");
    assert_eq!(health["schema_version"], 1);
    assert_eq!(health["model_version"].as_str().unwrap().len(), 16);

    let (s, concepts) = call(&app, Method::GET, "/api/v1/concepts", None).await;
    assert_eq!(s, StatusCode::OK);
    let list = concepts["concepts"].as_array().unwrap();
    assert_eq!(list.len(), 6);
    assert!(list.iter().all(|c| c["relevance"].is_number()));
    assert_eq!(list[0]["index"], 0);

    let (s, samples) = call(&app, Method::GET, "/api/v1/samples", None).await;
    assert_eq!(s, StatusCode::OK);
    let ids: Vec<&str> = samples["samples"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["s0", "s1", "s2", "s3", "s4", "s5", "s6", "s7"]);
    assert_eq!(samples["samples"][1]["labels"], json!(["class 1"]));
}

#[tokio::test]
async fn empty_intervention_matches_predict() {
    let app = app();
    let (s, p) = post(&app, "/api/v1/predict", json!({"sample_id": "s0"})).await;
    assert_eq!(s, StatusCode::OK);
    let (s, i) = post(&app, "/api/v1/intervene", json!({"sample_id": "s0", "clamps": []})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(p, i);
    let r = response(p);
    assert_eq!(r.schema_version, 1);
    assert_eq!(r.concept_scores.len(), 6);
    assert_eq!(r.class_probs.len(), 2);
    assert!(r.clamped.is_empty());
    assert!(r.concept_scores.iter().all(|c| (0.0..=1.0).contains(&c.score)));
    assert!(r.class_probs.iter().all(|c| (0.0..=1.0).contains(&c.probability)));
    assert!((r.class_probs.iter().map(|c| c.probability).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[tokio::test]
async fn clamp_forces_score_and_is_reported() {
    let app = app();
    for k in 0..6 {
        for v in [0.0, 1.0] {
            let (s, body) = post(
                &app,
                "/api/v1/intervene",
                json!({"sample_id": "s3", "clamps": [{"index": k, "value": v}]}),
            )
            .await;
            assert_eq!(s, StatusCode::OK);
            let r = response(body);
            assert_eq!(r.concept_scores[k].score, v);
            assert_eq!(r.clamped.len(), 1);
            assert_eq!(r.clamped[0].index, k);
            assert_eq!(r.clamped[0].source, ClampSource::Request);
            assert_eq!(r.clamped[0].target, ClampTarget::Z);
        }
    }
}

#[tokio::test]
async fn clamp_by_name() {
    let app = app();
    let (_, concepts) = call(&app, Method::GET, "/api/v1/concepts", None).await;
    let name = concepts["concepts"][2]["name"].as_str().unwrap().to_string();
    let (s, body) = post(
        &app,
        "/api/v1/intervene",
        json!({"sample_id": "s0", "clamps": [{"name": name, "value": 1}]}),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(response(body).concept_scores[2].score, 1.0);
}

#[tokio::test]
async fn annotation_and_hint_clamps_are_listed() {
    let app = app();
    let (_, body) = post(&app, "/api/v1/predict", json!({"sample_id": "s1"})).await;
    let r = response(body);
    let prior: Vec<(usize, f64)> = r
        .clamped
        .iter()
        .filter(|c| c.target == ClampTarget::Prior)
        .map(|c| (c.index, c.value))
        .collect();
    assert_eq!(prior, [(1, 1.0), (2, 0.0)]);
    assert!(r.clamped.iter().all(|c| c.source == ClampSource::Annotation));

    let (_, body) = post(&app, "/api/v1/predict", json!({"sample_id": "s2"})).await;
    let r = response(body);
    let hint = r.clamped.iter().find(|c| c.source == ClampSource::Hint).expect("stored hint clamps");
    assert_eq!(hint.index, 4);
    assert_eq!(r.concept_scores[4].score, 1.0);

    // a request clamp on the hinted concept wins
    let (_, body) = post(
        &app,
        "/api/v1/intervene",
        json!({"sample_id": "s2", "clamps": [{"index": 4, "value": 0}]}),
    )
    .await;
    let r = response(body);
    assert_eq!(r.concept_scores[4].score, 0.0);
    assert_eq!(r.clamped[0].source, ClampSource::Request);

    // request hint text replaces the stored one
    let (_, concepts) = call(&app, Method::GET, "/api/v1/concepts", None).await;
    let name = concepts["concepts"][0]["name"].as_str().unwrap();
    let (_, body) = post(&app, "/api/v1/intervene", json!({"sample_id": "s0", "hint_text": name})).await;
    let r = response(body);
    assert!(r.clamped.iter().any(|c| c.index == 0 && c.source == ClampSource::Hint));
    assert_eq!(r.concept_scores[0].score, 1.0);
}

#[tokio::test]
async fn errors_are_json_and_service_stays_up() {
    let app = app();
    let (s, body) = post(&app, "/api/v1/predict", json!({"sample_id": "nope"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "unknown_sample");
    assert!(body["error"]["message"].as_str().unwrap().contains("nope"));

    for clamp in [
        json!({"index": 11, "value": 1}),
        json!({"index": -1, "value": 1}),
        json!({"index": 0, "value": 0.5}),
        json!({"name": "no such concept", "value": 1}),
        json!({"value": 1}),
    ] {
        let (s, body) = post(&app, "/api/v1/intervene", json!({"sample_id": "s0", "clamps": [clamp]})).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{clamp}");
        assert_eq!(body["error"]["code"], "bad_clamp");
        assert_eq!(body["schema_version"], 1);
    }

    let (s, body) = call(&app, Method::POST, "/api/v1/intervene", Some("{not json")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"]["code"], "bad_request");
    let (s, _) = post(&app, "/api/v1/intervene", json!({"sample_id": "s0", "clamps": [{"index": "x", "value": 1}]})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = call(&app, Method::GET, "/api/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = post(&app, "/api/v1/predict", json!({"sample_id": "s0"})).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_clients_do_not_share_clamps() {
    let app = app();
    let mut expected = Vec::new();
    for k in 0..6 {
        let body = json!({"sample_id": "s5", "clamps": [{"index": k, "value": 1}]});
        expected.push(post(&app, "/api/v1/intervene", body).await.1);
    }
    let (_, baseline) = post(&app, "/api/v1/predict", json!({"sample_id": "s5"})).await;
    let mut handles = Vec::new();
    for round in 0..4 {
        for k in 0..6 {
            let app = app.clone();
            handles.push(tokio::spawn(async move {
                let body = if (round + k) % 2 == 0 {
                    json!({"sample_id": "s5", "clamps": [{"index": k, "value": 1}]})
                } else {
                    json!({"sample_id": "s5"})
                };
                (round, k, post(&app, "/api/v1/intervene", body).await.1)
            }));
        }
    }
    for h in handles {
        let (round, k, got) = h.await.unwrap();
        if (round + k) % 2 == 0 {
            assert_eq!(got, expected[k]);
        } else {
            assert_eq!(got, baseline);
        }
    }
}

#[tokio::test]
async fn cors_allows_browser_origin() {
    let app = app();
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/api/v1/intervene")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");

    let restricted = router(
        Arc::new(common::engine()),
        cors(Some(&["http://ui.example".to_string()])).unwrap(),
    );
    let req = Request::builder()
        .uri("/api/v1/health")
        .header(header::ORIGIN, "http://ui.example")
        .body(Body::empty())
        .unwrap();
    let resp = restricted.oneshot(req).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://ui.example");
}
