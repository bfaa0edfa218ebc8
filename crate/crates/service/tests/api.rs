use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use cooctex::config::RunConfig;
use cooctex::cooc::{cooc_tensor, CoocParams, CoocStats, Normalizer, Palette};
use cooctex::training::init_checkpoint;
use cooctex::{procedural, Checkpoint};
use cooctex_service::{router, AppState, ServiceConfig, TensorJson};
use serde_json::{json, Value};
use tower::ServiceExt;

fn checkpoint() -> Checkpoint {
    let palette = Palette::new(vec![[0.2, 0.3, 0.4], [0.8, 0.7, 0.6]], vec![[0.2; 3], [0.2; 3]]).unwrap();
    let params = CoocParams::new(5, 3, 2.0).unwrap();
    let img = procedural::blobs(8, 8, 3);
    let t = cooc_tensor(img.view(), &palette, &params, 4).unwrap();
    let stats = CoocStats {
        palette,
        normalizer: Some(Normalizer::fit([&t]).unwrap()),
        params,
        downsample: 4,
        seed: 1,
    };
    let mut run = RunConfig::desk();
    run.downsample = 4;
    run.noise_channels = 2;
    run.generator_widths = vec![4, 3];
    run.critic_widths = vec![4, 1];
    run.critic_inject_after = 1;
    init_checkpoint(stats, &run).unwrap()
}

fn app(config: ServiceConfig) -> Router {
    router(AppState::new(checkpoint(), config))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, Option<String>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    let ct = res.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string());
    let bytes = to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, bytes, ct)
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn tensor_of(bytes: &[u8]) -> cooctex::CoocTensor {
    let t: TensorJson = serde_json::from_slice(bytes).unwrap();
    t.to_tensor("tensor").unwrap()
}

async fn new_session(app: &Router) -> u64 {
    let (status, body, _) = call(app, "POST", "/session", Some(json!({"matrix": [[0.5, 0.2], [0.2, 0.1]], "cells": [2, 3], "seed": 5}))).await;
    assert_eq!(status, StatusCode::OK);
    json_of(&body)["id"].as_u64().unwrap()
}

#[tokio::test]
async fn palette_endpoint() {
    let app = app(ServiceConfig::default());
    let (status, body, _) = call(&app, "GET", "/palette", None).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_of(&body);
    assert_eq!(v["k"], 2);
    assert_eq!(v["centers"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn edit_synthesize_undo_round_trip() {
    let app = app(ServiceConfig::default());
    let id = new_session(&app).await;
    let (_, before, _) = call(&app, "GET", &format!("/session/{id}/tensor"), None).await;
    let original = tensor_of(&before);
    assert_eq!(original.dim(), (2, 3));

    let (status, png0, ct) = call(&app, "POST", &format!("/session/{id}/synthesize"), Some(json!({}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ct.as_deref(), Some("image/png"));
    assert_eq!(cooctex::imageio::decode(&png0).unwrap().dim(), (8, 12, 3));

    let (status, _, _) = call(&app, "POST", &format!("/session/{id}/edit"), Some(json!({"bin": [0, 1], "factor": 1.0}))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, png1, _) = call(&app, "POST", &format!("/session/{id}/synthesize"), None).await;
    assert_eq!(png0, png1);

    let mut last = original.matrix_at(0, 0).values()[[0, 0]];
    for factor in [2.0, 2.0] {
        let (status, body, _) = call(&app, "POST", &format!("/session/{id}/edit"), Some(json!({"bin": [0, 0], "factor": factor}))).await;
        assert_eq!(status, StatusCode::OK);
        let t = tensor_of(&body);
        t.validate(1e-6).unwrap();
        let v = t.matrix_at(1, 2).values()[[0, 0]];
        assert!(v > last);
        last = v;
    }
    let (status, body, _) = call(&app, "POST", &format!("/session/{id}/edit"), Some(json!({"cell": [0, 1], "bin": [1, 0], "factor": 3.0}))).await;
    assert_eq!(status, StatusCode::OK);
    let edited = tensor_of(&body);
    assert_ne!(edited.matrix_at(0, 1), edited.matrix_at(0, 0));

    for _ in 0..4 {
        let (status, _, _) = call(&app, "POST", &format!("/session/{id}/undo"), None).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (_, after, _) = call(&app, "GET", &format!("/session/{id}/tensor"), None).await;
    let restored = tensor_of(&after);
    let bits = |t: &cooctex::CoocTensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&restored), bits(&original));
    let (status, _, _) = call(&app, "POST", &format!("/session/{id}/undo"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn sessions_are_isolated() {
    let app = app(ServiceConfig::default());
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    call(&app, "POST", &format!("/session/{a}/edit"), Some(json!({"bin": [1, 1], "factor": 5.0}))).await;
    let (_, ta, _) = call(&app, "GET", &format!("/session/{a}/tensor"), None).await;
    let (_, tb, _) = call(&app, "GET", &format!("/session/{b}/tensor"), None).await;
    assert_ne!(tensor_of(&ta), tensor_of(&tb));
    assert!((tensor_of(&tb).matrix_at(0, 0).values()[[1, 1]] - 0.1).abs() < 1e-12);
}

#[tokio::test]
async fn interpolate_endpoint() {
    let app = app(ServiceConfig::default());
    let id = new_session(&app).await;
    let (_, body, _) = call(&app, "GET", &format!("/session/{id}/tensor"), None).await;
    let mut other: TensorJson = serde_json::from_slice(&body).unwrap();
    for row in &mut other.values {
        for m in row {
            *m = vec![vec![0.1, 0.2], vec![0.2, 0.5]];
        }
    }
    let (status, body, _) = call(&app, "POST", &format!("/session/{id}/interpolate"), Some(json!({"other": other, "t": 1.5}))).await;
    assert_eq!(status, StatusCode::OK);
    let t = tensor_of(&body);
    t.validate(1e-6).unwrap();
    assert_eq!(t.matrix_at(0, 0).values()[[0, 0]], 0.0);
}

#[tokio::test]
async fn error_statuses() {
    let app = app(ServiceConfig::default());
    let (status, _, _) = call(&app, "GET", "/session/99/tensor", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let id = new_session(&app).await;
    let (status, body, _) = call(&app, "POST", &format!("/session/{id}/edit"), Some(json!({"bin": [0, 2], "factor": 1.0}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json_of(&body)["field"], "bin");
    let (status, body, _) = call(&app, "POST", &format!("/session/{id}/edit"), Some(json!({"bin": [0, 0], "factor": -1.0}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json_of(&body)["field"], "factor");
    let (status, _, _) = call(&app, "POST", "/session", Some(json!({"matrix": [[0.5, 0.5], [0.5, 0.5]]}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _, _) = call(&app, "POST", "/session", Some(json!({}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn session_from_image() {
    use base64::Engine;
    let app = app(ServiceConfig::default());
    let img = procedural::blobs(8, 16, 2);
    let png = cooctex::imageio::encode_png(img.view()).unwrap();
    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
    let (status, body, _) = call(&app, "POST", "/session", Some(json!({"image": b64}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["tensor"]["shape"], json!([2, 4, 2, 2]));
}

#[tokio::test]
async fn full_queue_is_rejected() {
    let app = app(ServiceConfig {
        queue_depth: 0,
        ..ServiceConfig::default()
    });
    let id = new_session(&app).await;
    let (status, _, _) = call(&app, "POST", &format!("/session/{id}/synthesize"), None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn cors_headers_present() {
    let app = app(ServiceConfig::default());
    let req = Request::builder()
        .method("GET")
        .uri("/palette")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let res = app.oneshot(req).await.unwrap();
    assert!(res.headers().contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
}
