//! Error responses: a status code plus `{"error": {...}}`.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;
use thiserror::Error;

use seqmap_core::pipeline::{ErrorKind, PipelineError};

use crate::session::SessionState;

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("cannot {action} in state {state:?}")]
    Conflict { action: &'static str, state: SessionState },
    #[error("session is read-only (restored from disk)")]
    ReadOnly,
    #[error("{0}")]
    Invalid(String),
    #[error("{stage}: {message}")]
    Numeric { stage: String, message: String },
    #[error("internal error: {0}")]
    Internal(String),
}

#[derive(Serialize)]
struct Body<'a> {
    error: Detail<'a>,
}

#[derive(Serialize)]
struct Detail<'a> {
    status: u16,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage: Option<&'a str>,
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict { .. } | ApiError::ReadOnly => StatusCode::CONFLICT,
            ApiError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ApiError::Numeric { .. } | ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match e.kind {
            ErrorKind::Input if e.stage == "output" => ApiError::Internal(e.to_string()),
            ErrorKind::Input => ApiError::Invalid(e.to_string()),
            ErrorKind::Numeric => ApiError::Numeric {
                stage: e.stage.clone(),
                message: e.message,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        let stage = match &self {
            ApiError::Numeric { stage, .. } => Some(stage.as_str()),
            _ => None,
        };
        let body = Body {
            error: Detail {
                status: status.as_u16(),
                message: self.to_string(),
                stage,
            },
        };
        (status, Json(body)).into_response()
    }
}
