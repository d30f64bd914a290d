use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use serde_json::Value;
use washy::household::HouseholdError;
use washy::reminders::ReminderError;

/// Every error response has this body.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorEnvelope {
    pub code: &'static str,
    pub message: String,
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorEnvelope,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorEnvelope {
                code,
                message: message.into(),
                detail: Value::Null,
            },
        }
    }

    pub fn with_detail(mut self, detail: impl Into<Value>) -> Self {
        self.body.detail = detail.into();
        self
    }

    pub fn unauthorized() -> Self {
        Self::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or unknown bearer token",
        )
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", message)
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "conflict", message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    pub fn bad_gateway(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_GATEWAY, "upstream", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<ReminderError> for ApiError {
    fn from(e: ReminderError) -> Self {
        match &e {
            ReminderError::UnknownId(_) => ApiError::not_found(e.to_string()),
            ReminderError::IllegalTransition { from, .. } => {
                ApiError::conflict(e.to_string()).with_detail(serde_json::json!({ "state": from }))
            }
            ReminderError::Persistence(_) => ApiError::internal(e.to_string()),
            _ => ApiError::unprocessable(e.to_string()),
        }
    }
}

impl From<HouseholdError> for ApiError {
    fn from(e: HouseholdError) -> Self {
        match e {
            HouseholdError::Reminder(r) => r.into(),
            HouseholdError::UnknownEvent(_) => ApiError::not_found(e.to_string()),
            HouseholdError::Device(d) => ApiError::bad_gateway(d.to_string()),
            HouseholdError::Persistence(_) => ApiError::internal(e.to_string()),
        }
    }
}
