use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use promise_core::apm::{ApmVariant, AutoPrompter};
use promise_core::autodiff::ParamStore;
use promise_core::data::{generate, Domain, PromptSetting};
use promise_core::model::ModelConfig;
use promise_core::pattern::{IpsVariant, PatternShift};
use promise_core::train::{pretrain_base, train_adaptation, PretrainConfig, RunConfig};
use promise_seg::checkpoint::Checkpoint;
use promise_seg::dataset::{decode_mask, encode_rgb_png};
use promise_seg::service::{router, Service, MAX_IMAGE_SIDE};

const SIZE: usize = 32;

fn cfg() -> ModelConfig {
    ModelConfig::small()
}

fn base() -> &'static ParamStore<f32> {
    static BASE: OnceLock<ParamStore<f32>> = OnceLock::new();
    BASE.get_or_init(|| {
        let pc = PretrainConfig { model: cfg(), epochs: 10, lr: 3e-3, ..PretrainConfig::default() };
        pretrain_base(&pc, &generate(Domain::Source, 300, SIZE, 1), &[]).unwrap().store
    })
}

/// Base plus an ips-pae adaptation trained on targetA.
fn adapted() -> &'static ParamStore<f32> {
    static ADAPTED: OnceLock<ParamStore<f32>> = OnceLock::new();
    ADAPTED.get_or_init(|| {
        let run = RunConfig { model: cfg(), epochs: 10, lr: 1e-2, ..RunConfig::default() };
        train_adaptation(&run, base(), &generate(Domain::TargetA, 60, SIZE, 3), &[]).unwrap().store
    })
}

/// A checkpoint with a pattern generator and a 16P cross APM head. Without
/// `trained` the generator is freshly zero-initialized.
fn app(trained: bool) -> Router {
    let mut store = if trained {
        adapted().clone()
    } else {
        let mut s = base().clone();
        PatternShift::attach(&mut s, &cfg(), IpsVariant::IpsPae, 2).unwrap();
        s
    };
    AutoPrompter::attach(&mut store, &cfg(), ApmVariant::Cross, PromptSetting::P16, 3).unwrap();
    let svc = Service::new(Checkpoint::new(cfg(), store)).unwrap();
    router(Arc::new(svc), None)
}

fn fixture(domain: Domain, seed: u64) -> String {
    let s = &generate(domain, 1, SIZE, seed)[0];
    B64.encode(encode_rgb_png(SIZE, &s.pixels).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(Body::from).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v, bytes)
}

fn segment_body(image: &str, use_ips: bool) -> String {
    json!({
        "image_b64": image,
        "points": [
            {"x": 0.5, "y": 0.5, "label": 1},
            {"x": 0.45, "y": 0.55, "label": 1},
            {"x": 0.05, "y": 0.05, "label": -1},
            {"x": 0.95, "y": 0.9, "label": -1}
        ],
        "use_ips": use_ips
    })
    .to_string()
}

async fn mask(app: &Router, image: &str, use_ips: bool) -> Vec<u8> {
    let (status, v, _) = call(app, "POST", "/segment", Some(segment_body(image, use_ips))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert!(v["iou_pred"].as_f64().is_some());
    assert!(v["timing_ms"].as_f64().unwrap() >= 0.0);
    B64.decode(v["mask_b64"].as_str().unwrap()).unwrap()
}

#[tokio::test]
async fn health_and_model() {
    let app = app(false);
    let (status, v, _) = call(&app, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok"}));
    let (status, v, _) = call(&app, "GET", "/model", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["config"]["image_size"], SIZE);
    assert_eq!(v["ips_variant"], "ips-pae");
    assert_eq!(v["apm"]["variant"], "cross");
    assert_eq!(v["apm"]["setting"], "16P");
    assert_eq!(v["frozen_hash"], hex::encode(base().frozen_hash()));
}

#[tokio::test]
async fn mask_is_a_binary_single_channel_png() {
    let app = app(true);
    let png = mask(&app, &fixture(Domain::TargetA, 4), true).await;
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!(img.color(), image::ColorType::L8);
    assert_eq!((img.width(), img.height()), (SIZE as u32, SIZE as u32));
    assert!(img.to_luma8().pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
}

#[tokio::test]
async fn ips_toggle_changes_the_mask_only_when_the_generator_is_nonzero() {
    let img = fixture(Domain::TargetA, 4);
    let trained = app(true);
    assert_ne!(mask(&trained, &img, false).await, mask(&trained, &img, true).await);
    let zero = app(false);
    assert_eq!(mask(&zero, &img, false).await, mask(&zero, &img, true).await);
    assert_eq!(mask(&zero, &img, false).await, mask(&trained, &img, false).await);
}

#[tokio::test]
async fn repeated_requests_are_identical() {
    let app = app(true);
    let img = fixture(Domain::TargetB, 7);
    let (_, a, _) = call(&app, "POST", "/segment", Some(segment_body(&img, true))).await;
    let (_, b, _) = call(&app, "POST", "/segment", Some(segment_body(&img, true))).await;
    assert_eq!(a["mask_b64"], b["mask_b64"]);
    assert_eq!(a["iou_pred"], b["iou_pred"]);
}

#[tokio::test]
async fn other_image_sizes_are_resized_both_ways() {
    let app = app(true);
    let s = &generate(Domain::Source, 1, 48, 2)[0];
    let img = B64.encode(encode_rgb_png(48, &s.pixels).unwrap());
    let (w, h, _) = decode_mask(&mask(&app, &img, true).await).unwrap();
    assert_eq!((w, h), (48, 48));
}

#[tokio::test]
async fn auto_prompt_returns_eight_positive_then_eight_negative() {
    let app = app(true);
    let body = json!({"image_b64": fixture(Domain::TargetB, 1), "setting": "16P"}).to_string();
    let (status, v, _) = call(&app, "POST", "/auto_prompt", Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let pts = v["points"].as_array().unwrap();
    assert_eq!(pts.len(), 16);
    let labels: Vec<i64> = pts.iter().map(|p| p["label"].as_i64().unwrap()).collect();
    assert_eq!(labels, [vec![1; 8], vec![-1; 8]].concat());
    for p in pts {
        for k in ["x", "y"] {
            assert!((0.0..=1.0).contains(&p[k].as_f64().unwrap()));
        }
    }
    let (_, again, _) = call(&app, "POST", "/auto_prompt", Some(body)).await;
    assert_eq!(v, again);

    let seg = json!({"image_b64": fixture(Domain::TargetB, 1), "points": [], "use_ips": true}).to_string();
    let (status, s, _) = call(&app, "POST", "/segment", Some(seg)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s["points"], v["points"]);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let app = app(false);
    let img = fixture(Domain::Source, 0);
    let cases = [
        ("{not json".to_string(), StatusCode::BAD_REQUEST),
        (json!({"points": []}).to_string(), StatusCode::BAD_REQUEST),
        (json!({"image_b64": img, "points": [{"x": 0.5, "y": 0.5, "label": 2}]}).to_string(), StatusCode::BAD_REQUEST),
        (json!({"image_b64": "@@@", "points": []}).to_string(), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"image_b64": B64.encode(b"not a png"), "points": []}).to_string(), StatusCode::UNPROCESSABLE_ENTITY),
        (
            json!({"image_b64": img, "points": [{"x": 1.5, "y": 0.5, "label": 1}]}).to_string(),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
    ];
    for (body, want) in cases {
        let (status, v, _) = call(&app, "POST", "/segment", Some(body.clone())).await;
        assert_eq!(status, want, "{body}");
        assert!(v["error"].as_str().is_some_and(|e| !e.is_empty()), "{v}");
    }
    let (status, _, _) =
        call(&app, "POST", "/auto_prompt", Some(json!({"image_b64": img, "setting": "3P"}).to_string())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let side = MAX_IMAGE_SIDE + 1;
    let big = image::GrayImage::new(side as u32, 1);
    let mut png = std::io::Cursor::new(Vec::new());
    big.write_to(&mut png, image::ImageFormat::Png).unwrap();
    let body = json!({"image_b64": B64.encode(png.get_ref()), "points": []}).to_string();
    assert_eq!(call(&app, "POST", "/segment", Some(body)).await.0, StatusCode::PAYLOAD_TOO_LARGE);
    let huge = format!("{{\"image_b64\": \"{}\"}}", "A".repeat(9 << 20));
    assert_eq!(call(&app, "POST", "/segment", Some(huge)).await.0, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn static_files_are_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>studio</html>").unwrap();
    let mut store = base().clone();
    PatternShift::attach(&mut store, &cfg(), IpsVariant::IpsOnly, 2).unwrap();
    let app = router(Arc::new(Service::new(Checkpoint::new(cfg(), store)).unwrap()), Some(dir.path().into()));
    let (status, _, body) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>studio</html>");
    let (status, v, _) = call(&app, "GET", "/health", None).await;
    assert_eq!((status, v), (StatusCode::OK, json!({"status": "ok"})));
    let (status, v, _) = call(&app, "GET", "/model", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(v["apm"].is_null());
    assert_eq!(v["adapted_params"], 4 * 32);
    let body = json!({"image_b64": fixture(Domain::Source, 0), "points": []}).to_string();
    assert_eq!(call(&app, "POST", "/segment", Some(body)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}
