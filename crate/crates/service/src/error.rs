use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use geoecon::pipeline::PipelineError;
use geoecon::store::StoreError;
use serde_json::json;

/// Body of every non-2xx response: `{"status", "code", "message"}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    /// Stable machine-readable code, upper snake case.
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError { status, code, message: message.into() }
    }

    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(code: &'static str, message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "status": self.status.as_u16(), "code": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Constraint(m) => ApiError::new(StatusCode::CONFLICT, "CONFLICT", m),
            other => ApiError::internal(other.to_string()),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::InvalidSpec(m) => ApiError::bad_request("INVALID_TASK", m),
            PipelineError::UnknownModel(m) => ApiError::not_found("UNKNOWN_MODEL", format!("unknown model {m:?}")),
            PipelineError::Geo(g) => ApiError::bad_request("INVALID_TASK", g.to_string()),
            PipelineError::Data(d) => {
                ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "CORPUS_UNAVAILABLE", d.to_string())
            }
            PipelineError::Store(s) => s.into(),
            other => ApiError::internal(other.to_string()),
        }
    }
}
