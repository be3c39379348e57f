//! API errors and their HTTP rendering.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;

use nest_core::NestError;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("session '{0}' not found")]
    NotFound(String),

    #[error("{0}")]
    Conflict(String),

    #[error("{message}")]
    BadRequest { message: String, field: Option<String> },

    #[error("storage failure: {0}")]
    Storage(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl ApiError {
    pub fn bad_request(message: impl Into<String>) -> Self {
        ApiError::BadRequest {
            message: message.into(),
            field: None,
        }
    }

    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::BadRequest { .. } => StatusCode::BAD_REQUEST,
            ApiError::Storage(_) | ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<NestError> for ApiError {
    fn from(e: NestError) -> Self {
        match e {
            NestError::Config { ref field, .. } => ApiError::BadRequest {
                field: Some(field.clone()),
                message: e.to_string(),
            },
            NestError::SingularKernel { .. } | NestError::Io(_) => ApiError::Internal(e.to_string()),
            other => ApiError::bad_request(other.to_string()),
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let field = match &self {
            ApiError::BadRequest { field, .. } => field.as_deref(),
            _ => None,
        };
        let body = ErrorBody {
            error: self.to_string(),
            field,
        };
        (self.status(), Json(body)).into_response()
    }
}
