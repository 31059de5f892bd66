use std::collections::BTreeSet;
use std::path::PathBuf;

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Json;
use chrono::Utc;
use commet_core::synth::ScenarioPurpose;
use commet_core::{
    catalog_options, ConflictLabel, DetectionInput, EmergencyLevel, Error, ImageRef, PreferencePrediction, Scenario,
    SolutionOption, UserCase,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{ApiError, ErrorCode};
use crate::App;

type ApiResult<T> = std::result::Result<T, ApiError>;

impl From<JsonRejection> for ApiError {
    fn from(rejection: JsonRejection) -> Self {
        ApiError::validation(rejection.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(rejection: QueryRejection) -> Self {
        ApiError::validation(rejection.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(rejection: PathRejection) -> Self {
        ApiError::validation(rejection.body_text())
    }
}

/// Runs blocking engine work off the async workers.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> commet_core::Result<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
        .map_err(ApiError::from)
}

pub async fn health(State(app): State<App>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "detector": app.0.detector.is_some(),
        "scenarios": app.0.scenarios.len(),
    }))
}

pub async fn no_route(uri: Uri) -> ApiError {
    ApiError::not_found(format!("no route for {}", uri.path()))
}

pub async fn no_method(method: Method, uri: Uri) -> ApiError {
    ApiError::new(
        StatusCode::METHOD_NOT_ALLOWED,
        ErrorCode::Validation,
        format!("{method} not allowed on {}", uri.path()),
    )
}

pub async fn catalog(path: Result<Path<String>, PathRejection>) -> ApiResult<Json<Vec<SolutionOption>>> {
    let Path(name) = path?;
    let label: ConflictLabel = name.parse()?;
    Ok(Json(catalog_options(label)?))
}

#[derive(Debug, Deserialize)]
pub struct UserQuery {
    pub user: String,
    #[serde(default)]
    pub purpose: Option<ScenarioPurpose>,
}

impl UserQuery {
    fn user(&self) -> ApiResult<&str> {
        let user = self.user.trim();
        if user.is_empty() {
            return Err(ApiError::validation("user must not be empty"));
        }
        Ok(user)
    }
}

/// A scenario as the annotation UI renders it, with its options in catalog order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioView {
    pub scenario_id: String,
    pub purpose: ScenarioPurpose,
    pub conflict_type: ConflictLabel,
    pub scenario: Scenario,
    pub options: Vec<SolutionOption>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingScenarios {
    pub user: String,
    pub purpose: ScenarioPurpose,
    pub total: usize,
    pub pending: Vec<ScenarioView>,
}

/// Scenarios of the requested purpose (annotation by default) that the user has not
/// answered yet. For prediction scenarios, "answered" means a prediction exists.
pub async fn list_scenarios(
    State(app): State<App>,
    query: Result<Query<UserQuery>, QueryRejection>,
) -> ApiResult<Json<PendingScenarios>> {
    let Query(query) = query?;
    let user = query.user()?.to_string();
    let purpose = query.purpose.unwrap_or(ScenarioPurpose::Annotation);
    let state = &app.0;
    let done: BTreeSet<String> = match purpose {
        ScenarioPurpose::Annotation => state
            .engine
            .store()
            .cases_for_user(&user)
            .into_iter()
            .filter_map(|c| c.scenario.scenario_id)
            .collect(),
        ScenarioPurpose::Prediction => state
            .engine
            .store()
            .predictions_for_user(&user)
            .into_iter()
            .filter_map(|p| p.scenario.scenario_id)
            .collect(),
    };
    let mut total = 0;
    let mut pending = Vec::new();
    for entry in state.scenarios.iter(Some(purpose)) {
        total += 1;
        let id = entry.scenario.scenario_id.clone().unwrap_or_default();
        if done.contains(&id) {
            continue;
        }
        pending.push(ScenarioView {
            scenario_id: id,
            purpose,
            conflict_type: entry.scenario.label,
            options: catalog_options(entry.scenario.label)?,
            scenario: entry.scenario.clone(),
        });
    }
    Ok(Json(PendingScenarios {
        user,
        purpose,
        total,
        pending,
    }))
}

/// Raw bytes of a scenario's observation image.
pub async fn scenario_image(
    State(app): State<App>,
    path: Result<Path<String>, PathRejection>,
) -> ApiResult<Response> {
    let Path(id) = path?;
    let image = app.0.scenarios.scenario(&id)?.input.image.clone();
    let bytes = blocking(move || image.load().map(|b| b.into_owned())).await?;
    let mut response = bytes.clone().into_response();
    response
        .headers_mut()
        .insert(header::CONTENT_TYPE, HeaderValue::from_static(sniff(&bytes).1));
    Ok(response)
}

/// How a submission names the chosen option: catalog ordinal, exact text, or the full
/// option object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OptionChoice {
    Ordinal(u8),
    Text(String),
    Option(SolutionOption),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSubmission {
    pub user_id: String,
    pub scenario_id: String,
    pub chosen_option: OptionChoice,
    pub emergency: u8,
    /// Defaults to `<user_id>:<scenario_id>`, so resubmitting replaces the answer.
    #[serde(default)]
    pub case_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSubmitted {
    pub case_id: String,
    /// False when an identical case was already stored.
    pub written: bool,
}

pub async fn submit_case(
    State(app): State<App>,
    body: Result<Json<CaseSubmission>, JsonRejection>,
) -> ApiResult<Json<CaseSubmitted>> {
    let Json(body) = body?;
    let user_id = body.user_id.trim().to_string();
    if user_id.is_empty() {
        return Err(ApiError::validation("user_id must not be empty"));
    }
    let scenario = app.0.scenarios.scenario(&body.scenario_id)?.clone();
    let chosen_option = match body.chosen_option {
        OptionChoice::Ordinal(n) => SolutionOption::from_ordinal(scenario.label, n)?,
        OptionChoice::Text(text) => SolutionOption::from_text(scenario.label, &text)?,
        OptionChoice::Option(option) => option,
    };
    let case = UserCase {
        case_id: body
            .case_id
            .filter(|id| !id.trim().is_empty())
            .unwrap_or_else(|| format!("{user_id}:{}", body.scenario_id)),
        user_id,
        scenario,
        chosen_option,
        emergency: EmergencyLevel::new(body.emergency)?,
        created_at: Utc::now(),
    };
    let store = app.0.engine.store().clone();
    let (case_id, written) = blocking(move || store.record_case(&case)).await?;
    Ok(Json(CaseSubmitted { case_id, written }))
}

pub async fn list_cases(
    State(app): State<App>,
    query: Result<Query<UserQuery>, QueryRejection>,
) -> ApiResult<Json<Vec<UserCase>>> {
    let Query(query) = query?;
    Ok(Json(app.0.engine.store().cases_for_user(query.user()?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    pub user_id: String,
    /// A scenario from the loaded set.
    #[serde(default)]
    pub scenario_id: Option<String>,
    /// An ad hoc scenario; used when `scenario_id` is absent.
    #[serde(default)]
    pub scenario: Option<Scenario>,
}

pub async fn predict(
    State(app): State<App>,
    body: Result<Json<PredictRequest>, JsonRejection>,
) -> ApiResult<Json<PreferencePrediction>> {
    let Json(body) = body?;
    let scenario = match (&body.scenario_id, body.scenario) {
        (Some(id), _) => app.0.scenarios.scenario(id)?.clone(),
        (None, Some(scenario)) => scenario,
        (None, None) => return Err(ApiError::validation("one of scenario_id or scenario is required")),
    };
    let user = body.user_id.trim().to_string();
    if user.is_empty() {
        return Err(ApiError::validation("user_id must not be empty"));
    }
    let state = app.0.clone();
    let prediction = blocking(move || state.engine.predict(&user, &scenario)).await?;
    Ok(Json(prediction))
}

pub async fn list_predictions(
    State(app): State<App>,
    query: Result<Query<UserQuery>, QueryRejection>,
) -> ApiResult<Json<Vec<PreferencePrediction>>> {
    let Query(query) = query?;
    Ok(Json(app.0.engine.store().predictions_for_user(query.user()?)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRequest {
    pub rating: u8,
}

pub async fn rate(
    State(app): State<App>,
    path: Result<Path<String>, PathRejection>,
    body: Result<Json<RatingRequest>, JsonRejection>,
) -> ApiResult<Json<PreferencePrediction>> {
    let Path(id) = path?;
    let Json(body) = body?;
    let store = app.0.engine.store().clone();
    Ok(Json(blocking(move || store.record_rating(&id, body.rating)).await?))
}

/// JSON body of `/v1/detect`; same shape as a detection input.
pub type DetectRequest = DetectionInput;

/// Accepts JSON (image as a server-local path or inline base64) or multipart with
/// `image` (file) or `image_path`, plus `task`, `step` and optional `speech`.
/// Uploaded and inline bytes are stored content-addressed under `uploads/`; the
/// stored path comes back in the `x-commet-image` header.
pub async fn detect(State(app): State<App>, request: Request) -> ApiResult<Response> {
    let Some(detector) = app.0.detector.clone() else {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            ErrorCode::BackendUnavailable,
            "no detection engine configured",
        ));
    };
    let is_multipart = request
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let mut input = if is_multipart {
        let multipart = Multipart::from_request(request, &())
            .await
            .map_err(|e| ApiError::validation(e.body_text()))?;
        read_multipart(multipart).await?
    } else {
        let Json(input) = Json::<DetectRequest>::from_request(request, &()).await?;
        input
    };
    let mut stored = None;
    if let ImageRef::Bytes(bytes) = &input.image {
        let path = store_upload(&app.0.uploads, bytes.clone()).await?;
        stored = Some(path.clone());
        input.image = ImageRef::Path(path);
    }
    let result = tokio::task::spawn_blocking(move || detector.detect(&input))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
        .map_err(|e| match e {
            // an unreadable image path is the caller's mistake
            Error::Io { .. } => ApiError::validation(e.to_string()),
            other => ApiError::from(other),
        })?;
    let mut response = Json(result).into_response();
    if let Some(path) = stored.and_then(|p| HeaderValue::from_str(&p.to_string_lossy()).ok()) {
        response.headers_mut().insert("x-commet-image", path);
    }
    Ok(response)
}

async fn read_multipart(mut multipart: Multipart) -> ApiResult<DetectionInput> {
    let mut image: Option<ImageRef> = None;
    let (mut task, mut step, mut speech) = (None, None, None);
    let bad = |e: axum::extract::multipart::MultipartError| ApiError::validation(e.body_text());
    while let Some(field) = multipart.next_field().await.map_err(bad)? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "image" => image = Some(ImageRef::Bytes(field.bytes().await.map_err(bad)?.to_vec())),
            "image_path" => image = Some(ImageRef::Path(PathBuf::from(field.text().await.map_err(bad)?))),
            "task" => task = Some(field.text().await.map_err(bad)?),
            "step" => step = Some(field.text().await.map_err(bad)?),
            "speech" => speech = Some(field.text().await.map_err(bad)?),
            other => return Err(ApiError::validation(format!("unexpected multipart field {other:?}"))),
        }
    }
    let image = image.ok_or_else(|| ApiError::validation("missing field: image or image_path"))?;
    let task = task.ok_or_else(|| ApiError::validation("missing field: task"))?;
    let step = step.ok_or_else(|| ApiError::validation("missing field: step"))?;
    Ok(DetectionInput::new(image, task, step, speech.filter(|s| !s.trim().is_empty())))
}

fn sniff(bytes: &[u8]) -> (&'static str, &'static str) {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        ("png", "image/png")
    } else if bytes.starts_with(&[0xff, 0xd8, 0xff]) {
        ("jpg", "image/jpeg")
    } else {
        ("bin", "application/octet-stream")
    }
}

async fn store_upload(dir: &std::path::Path, bytes: Vec<u8>) -> ApiResult<PathBuf> {
    let dir = dir.to_path_buf();
    blocking(move || {
        let digest = hex::encode(Sha256::digest(&bytes));
        let path = dir.join(format!("{digest}.{}", sniff(&bytes).0));
        if !path.exists() {
            let tmp = dir.join(format!(".{digest}.tmp"));
            std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
            std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(path)
    })
    .await
}
