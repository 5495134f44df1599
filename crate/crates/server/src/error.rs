//! Error bodies with machine-readable codes.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use orsim_core::workflow::WorkflowError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub code: &'static str,
    pub message: String,
}

/// Wire form: `{"error": {"code": ..., "message": ...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

impl ApiError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            code,
            message: message.into(),
        }
    }

    pub fn unknown_session(id: &str) -> Self {
        ApiError::new("UnknownSession", format!("no session `{id}`"))
    }

    pub fn invalid_config(message: impl Into<String>) -> Self {
        ApiError::new("InvalidConfig", message)
    }

    pub fn status(&self) -> StatusCode {
        match self.code {
            "Unauthorized" => StatusCode::UNAUTHORIZED,
            "UnknownSession" | "UnknownCase" | "UnknownRun" => StatusCode::NOT_FOUND,
            "InvalidConfig" | "InvalidCase" | "BadRequest" => StatusCode::BAD_REQUEST,
            "BackendFailure" => StatusCode::BAD_GATEWAY,
            "Internal" => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::CONFLICT,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody {
            error: ErrorDetail {
                code: self.code.to_string(),
                message: self.message.clone(),
            },
        }
    }
}

impl From<WorkflowError> for ApiError {
    fn from(e: WorkflowError) -> Self {
        ApiError::new(e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self.body())).into_response()
    }
}
