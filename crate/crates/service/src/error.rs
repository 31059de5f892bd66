use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use commet_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Validation,
    NotFound,
    BackendUnavailable,
    Unauthorized,
    Internal,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    pub fn new(status: StatusCode, code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
            detail: None,
            status: status.as_u16(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, ErrorCode::Validation, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, ErrorCode::NotFound, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, ErrorCode::Internal, message)
    }

    pub fn with_detail(mut self, detail: Value) -> Self {
        self.detail = Some(detail);
        self
    }
}

impl From<Error> for ApiError {
    fn from(err: Error) -> Self {
        let message = err.to_string();
        match err {
            Error::Validation(_) | Error::InvalidArgument(_) | Error::ImageDecode(_) => ApiError::validation(message),
            Error::NotFound { .. } => ApiError::not_found(message),
            Error::UnparseableOutput { raw, reason } => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, ErrorCode::Validation, message)
                    .with_detail(serde_json::json!({ "reason": reason, "raw_output": raw }))
            }
            Error::Remote { .. } | Error::Timeout(_) => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, ErrorCode::BackendUnavailable, message)
            }
            Error::Escalation {
                speech_score,
                task_score,
                source,
            } => {
                let scores = serde_json::json!({ "speech_score": speech_score, "task_score": task_score });
                let mut inner = ApiError::from(*source);
                inner.message = message;
                let detail = match inner.detail.take() {
                    Some(Value::Object(mut map)) => {
                        map.insert("scores".into(), scores);
                        Value::Object(map)
                    }
                    _ => serde_json::json!({ "scores": scores }),
                };
                inner.with_detail(detail)
            }
            Error::BufferBuild { .. } | Error::EmptyBuffer(_) | Error::Config(_) | Error::Io { .. } | Error::Json { .. } => {
                ApiError::internal(message)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            log::error!("{}: {}", status, self.message);
        }
        (status, Json(self)).into_response()
    }
}
