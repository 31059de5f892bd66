use std::path::{Path, PathBuf};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use commet_core::config::BackendKind;
use commet_core::retrieval::{build_multimodal_buffer, build_speech_buffer, PromptStyle, SpeechBufferOptions};
use commet_core::synth::{write_corpus, SynthConfig};
use commet_core::{ConflictLabel, Dataset, EngineConfig, Providers};
use commet_service::{App, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    dataset: Dataset,
    config: PathBuf,
}

/// Small synthetic corpus, buffers built from all of it, mock engine config.
fn fixture(backend_up: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let dataset = write_corpus(&SynthConfig::small(5), &corpus).unwrap();
    let providers = Providers::mock(5, 256).unwrap();
    let speech = build_speech_buffer(&dataset.records, providers.text.as_ref(), SpeechBufferOptions::default()).unwrap();
    let mm = build_multimodal_buffer(&dataset.records, &dataset.root, &providers, PromptStyle::Separate).unwrap();
    speech.save(&dir.path().join("speech.jsonl")).unwrap();
    mm.save(&dir.path().join("multimodal.jsonl")).unwrap();
    let mut engine = EngineConfig::mock(5, 256, "speech.jsonl".into(), "multimodal.jsonl".into());
    if !backend_up {
        engine.backend.kind = BackendKind::Remote;
        engine.backend.endpoint = Some("http://127.0.0.1:1/v1/generate".into());
        engine.backend.timeout_ms = 2000;
    }
    let config = dir.path().join("engine.toml");
    std::fs::write(&config, engine.to_toml().unwrap()).unwrap();
    Fixture {
        data: dir.path().join("data"),
        _dir: dir,
        dataset,
        config,
    }
}

fn router(f: &Fixture, token: Option<&str>) -> Router {
    let mut config = ServiceConfig::new(&f.data);
    config.engine_config = Some(f.config.clone());
    config.auth_token = token.map(str::to_string);
    App::build(&config).unwrap().router(&[])
}

async fn call(router: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut builder = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            builder = builder.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let response = router.clone().oneshot(builder.body(body).unwrap()).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

fn assert_api_error(body: &Value, code: &str) {
    assert_eq!(body["code"], code, "{body}");
    assert!(body["message"].as_str().is_some_and(|m| !m.is_empty()), "{body}");
}

fn record_input(f: &Fixture, label: ConflictLabel) -> Value {
    let record = f.dataset.records.iter().find(|r| r.label == label && r.is_static()).unwrap();
    serde_json::to_value(f.dataset.input(record)).unwrap()
}

#[tokio::test]
async fn detect_planted_conflict_over_json() {
    let f = fixture(true);
    let r = router(&f, None);
    let (status, body) = call(&r, "POST", "/v1/detect", Some(record_input(&f, ConflictLabel::ObjectState))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["label"], "object_state");
    assert_eq!(body["method"], "task_retrieval");
    assert!(body["task_score"].as_f64().unwrap() >= 0.94);
}

#[tokio::test]
async fn detect_rejects_missing_task_and_bad_paths() {
    let f = fixture(true);
    let r = router(&f, None);
    let mut input = record_input(&f, ConflictLabel::Normal);
    input.as_object_mut().unwrap().remove("task");
    let (status, body) = call(&r, "POST", "/v1/detect", Some(input)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_api_error(&body, "validation");

    let missing = json!({"image": "/nonexistent/frame.png", "task": "t", "step": "s"});
    let (status, body) = call(&r, "POST", "/v1/detect", Some(missing)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    assert_api_error(&body, "validation");

    let (status, body) = call(&r, "POST", "/v1/detect", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_api_error(&body, "validation");
}

// The remote backend owns a blocking HTTP client, which must be created and dropped
// outside the async runtime.
#[test]
fn forced_escalation_with_backend_down_is_503() {
    let f = fixture(false);
    let r = router(&f, None);
    let mut input = record_input(&f, ConflictLabel::Normal);
    input["task"] = json!("Assemble a bookshelf from flat-pack parts");
    input["step"] = json!("Fetch the screwdriver from the garage");
    input["speech"] = Value::Null;
    let rt = tokio::runtime::Runtime::new().unwrap();
    let (status, body) = rt.block_on(call(&r, "POST", "/v1/detect", Some(input)));
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{body}");
    assert_api_error(&body, "backend_unavailable");
    assert!(body["detail"]["scores"]["task_score"].as_f64().unwrap() < 0.94);
    drop(rt);
}

#[tokio::test]
async fn multipart_upload_is_stored_by_content() {
    let f = fixture(true);
    let r = router(&f, None);
    let record = f.dataset.records.iter().find(|r| r.label == ConflictLabel::GoalAbsence && r.is_static()).unwrap();
    let png = std::fs::read(record.image_path(&f.dataset.root)).unwrap();
    let boundary = "XcommetX";
    let mut body = Vec::new();
    for (name, value) in [("task", record.task.as_str()), ("step", record.step.as_str())] {
        body.extend(format!("--{boundary}\r\nContent-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}\r\n").as_bytes());
    }
    body.extend(
        format!("--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"f.png\"\r\nContent-Type: image/png\r\n\r\n")
            .as_bytes(),
    );
    body.extend(&png);
    body.extend(format!("\r\n--{boundary}--\r\n").as_bytes());
    let request = Request::builder()
        .method("POST")
        .uri("/v1/detect")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap();
    let response = r.clone().oneshot(request).await.unwrap();
    assert_eq!(response.status(), StatusCode::OK);
    let stored = PathBuf::from(response.headers()["x-commet-image"].to_str().unwrap());
    assert_eq!(std::fs::read(&stored).unwrap(), png);
    assert!(stored.starts_with(f.data.join("uploads")));
    assert!(stored.extension().is_some_and(|e| e == "png"));
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let result: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(result["label"], "goal_absence");
}

#[tokio::test]
async fn annotation_flow_counts_down_and_is_idempotent() {
    let f = fixture(true);
    let r = router(&f, None);
    let (status, body) = call(&r, "GET", "/v1/annotation/scenarios?user=ann", None).await;
    assert_eq!(status, StatusCode::OK);
    let pending = body["pending"].as_array().unwrap();
    assert_eq!(pending.len(), 20);
    for label in ConflictLabel::CONFLICTS {
        let n = pending.iter().filter(|s| s["conflict_type"] == label.as_str()).count();
        assert_eq!(n, 5, "{label:?}");
    }
    for view in pending {
        assert_eq!(view["options"].as_array().unwrap().len(), 4);
    }

    let ids: Vec<String> = pending.iter().take(3).map(|s| s["scenario_id"].as_str().unwrap().to_string()).collect();
    for id in &ids {
        let (status, body) = call(
            &r,
            "POST",
            "/v1/annotation/cases",
            Some(json!({"user_id": "ann", "scenario_id": id, "chosen_option": 2, "emergency": 3})),
        )
        .await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert_eq!(body["written"], true);
        assert_eq!(body["case_id"], format!("ann:{id}"));
    }
    let (_, body) = call(&r, "GET", "/v1/annotation/scenarios?user=ann", None).await;
    assert_eq!(body["pending"].as_array().unwrap().len(), 17);
    assert_eq!(body["total"], 20);

    let (status, body) = call(
        &r,
        "POST",
        "/v1/annotation/cases",
        Some(json!({"user_id": "ann", "scenario_id": ids[0], "chosen_option": 2, "emergency": 3})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["written"], false);

    let (_, cases) = call(&r, "GET", "/v1/annotation/cases?user=ann", None).await;
    assert_eq!(cases.as_array().unwrap().len(), 3);
    let (_, other) = call(&r, "GET", "/v1/annotation/scenarios?user=bob", None).await;
    assert_eq!(other["pending"].as_array().unwrap().len(), 20);
}

#[tokio::test]
async fn annotation_errors() {
    let f = fixture(true);
    let r = router(&f, None);
    let submit = |body: Value| call(&r, "POST", "/v1/annotation/cases", Some(body));
    let (status, body) = submit(json!({"user_id": "u", "scenario_id": "nope", "chosen_option": 1, "emergency": 1})).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_api_error(&body, "not_found");

    // an option from a different conflict type
    let wrong = json!({"conflict_type": "goal_absence", "text": "Inform the user and wait for instructions", "ordinal": 4});
    let (status, body) =
        submit(json!({"user_id": "u", "scenario_id": "human_interaction-00", "chosen_option": wrong, "emergency": 1})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    assert_api_error(&body, "validation");

    let (status, _) =
        submit(json!({"user_id": "u", "scenario_id": "human_interaction-00", "chosen_option": 5, "emergency": 1})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) =
        submit(json!({"user_id": "u", "scenario_id": "human_interaction-00", "chosen_option": 1, "emergency": 4})).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, body) = call(&r, "GET", "/v1/annotation/scenarios", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_api_error(&body, "validation");
}

#[tokio::test]
async fn prediction_follows_the_majority_and_accepts_ratings() {
    let f = fixture(true);
    let r = router(&f, None);
    let (_, body) = call(&r, "GET", "/v1/annotation/scenarios?user=p", None).await;
    let occupancy: Vec<String> = body["pending"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|s| s["conflict_type"] == "human_occupancy")
        .map(|s| s["scenario_id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(occupancy.len(), 5);
    // 3 votes for option 1, 1 for 2, 1 for 4
    for (id, option) in occupancy.iter().zip([1, 1, 2, 1, 4]) {
        let body = json!({"user_id": "p", "scenario_id": id, "chosen_option": option, "emergency": 2});
        assert_eq!(call(&r, "POST", "/v1/annotation/cases", Some(body)).await.0, StatusCode::OK);
    }
    let (_, targets) = call(&r, "GET", "/v1/annotation/scenarios?user=p&purpose=prediction", None).await;
    let target = targets["pending"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["conflict_type"] == "human_occupancy")
        .unwrap()["scenario_id"]
        .clone();
    let (status, prediction) = call(&r, "POST", "/v1/predict", Some(json!({"user_id": "p", "scenario_id": target}))).await;
    assert_eq!(status, StatusCode::OK, "{prediction}");
    assert_eq!(prediction["predicted_option"]["ordinal"], 1);
    assert_eq!(prediction["used_case_ids"].as_array().unwrap().len(), 5);
    assert!(prediction["preference_summary"].as_str().unwrap().len() > 10);

    let id = prediction["prediction_id"].as_str().unwrap();
    let (status, rated) = call(&r, "POST", &format!("/v1/predictions/{id}/rating"), Some(json!({"rating": 5}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(rated["rating"], 5);
    let (status, body) = call(&r, "POST", &format!("/v1/predictions/{id}/rating"), Some(json!({"rating": 9}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_api_error(&body, "validation");
    let (status, body) = call(&r, "POST", "/v1/predictions/missing/rating", Some(json!({"rating": 3}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_api_error(&body, "not_found");

    let (_, listed) = call(&r, "GET", "/v1/predictions?user=p", None).await;
    assert_eq!(listed.as_array().unwrap().len(), 1);
    assert_eq!(listed[0]["rating"], 5);
    let (_, targets) = call(&r, "GET", "/v1/annotation/scenarios?user=p&purpose=prediction", None).await;
    assert_eq!(targets["pending"].as_array().unwrap().len(), 19);

    let (status, body) = call(&r, "POST", "/v1/predict", Some(json!({"user_id": "p", "scenario_id": "nope"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_api_error(&body, "not_found");
}

#[tokio::test]
async fn restart_reproduces_listings() {
    let f = fixture(true);
    let before = {
        let r = router(&f, None);
        for (i, id) in ["object_state-00", "goal_absence-01", "human_interaction-02"].iter().enumerate() {
            let body = json!({"user_id": "z", "scenario_id": id, "chosen_option": i + 1, "emergency": 1});
            call(&r, "POST", "/v1/annotation/cases", Some(body)).await;
        }
        let (_, p) = call(&r, "POST", "/v1/predict", Some(json!({"user_id": "z", "scenario_id": "object_state-07"}))).await;
        let id = p["prediction_id"].as_str().unwrap().to_string();
        call(&r, "POST", &format!("/v1/predictions/{id}/rating"), Some(json!({"rating": 2}))).await;
        listings(&r).await
    };
    let r = router(&f, None);
    assert_eq!(listings(&r).await, before);
}

async fn listings(r: &Router) -> Vec<Value> {
    let mut out = Vec::new();
    for uri in ["/v1/annotation/cases?user=z", "/v1/predictions?user=z", "/v1/annotation/scenarios?user=z"] {
        out.push(call(r, "GET", uri, None).await.1);
    }
    out
}

#[tokio::test]
async fn bearer_token_guards_everything_but_health() {
    let f = fixture(true);
    let r = router(&f, Some("s3cret"));
    let (status, _) = call(&r, "GET", "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call(&r, "GET", "/v1/annotation/cases?user=a", None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_api_error(&body, "unauthorized");
    let request = Request::builder()
        .uri("/v1/annotation/cases?user=a")
        .header(header::AUTHORIZATION, "Bearer s3cret")
        .body(Body::empty())
        .unwrap();
    assert_eq!(r.clone().oneshot(request).await.unwrap().status(), StatusCode::OK);
}

#[tokio::test]
async fn unknown_routes_and_methods_get_api_errors() {
    let f = fixture(true);
    let r = router(&f, None);
    let (status, body) = call(&r, "GET", "/v1/nothing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_api_error(&body, "not_found");
    let (status, body) = call(&r, "DELETE", "/v1/predict", None).await;
    assert_eq!(status, StatusCode::METHOD_NOT_ALLOWED);
    assert_api_error(&body, "validation");
    let (status, body) = call(&r, "GET", "/v1/catalog/normal", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_api_error(&body, "validation");
    let (status, body) = call(&r, "GET", "/v1/catalog/human_occupancy", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body.as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn scenario_images_are_served() {
    let f = fixture(true);
    let r = router(&f, None);
    let request = Request::builder().uri("/v1/annotation/scenarios/goal_absence-03/image").body(Body::empty()).unwrap();
    let response = r.clone().oneshot(request).await.unwrap();
    assert_eq!(response.status(), StatusCode::OK);
    assert_eq!(response.headers()[header::CONTENT_TYPE], "image/png");
}

#[test]
fn preference_only_mode_without_engine_config() {
    let dir = tempfile::tempdir().unwrap();
    let app = App::build(&ServiceConfig::new(dir.path())).unwrap();
    let r = app.router(&["*".to_string()]);
    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        let (status, body) = call(&r, "POST", "/v1/detect", Some(json!({"image": "/x.png", "task": "t", "step": "s"}))).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
        assert_api_error(&body, "backend_unavailable");
        let (status, p) = call(&r, "POST", "/v1/predict", Some(json!({"user_id": "n", "scenario_id": "goal_absence-05"}))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(p["no_preference_data"], true);
    });
    assert!(scenario_file(dir.path()).exists());
}

fn scenario_file(data: &Path) -> PathBuf {
    data.join("scenarios.jsonl")
}
