//! The single error envelope every API failure uses.

use axum::extract::rejection::{BytesRejection, JsonRejection, PathRejection, QueryRejection};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use detflow_core::config::FieldError;
use detflow_core::export::ExportError;
use detflow_core::jobs::JobError;
use detflow_core::metrics::MetricsError;
use detflow_core::preprocess::PreprocessError;
use detflow_core::records::RecordError;
use detflow_core::workspace::WorkspaceError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<Vec<FieldError>>,
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.into(),
            message: message.into(),
            details: None,
        }
    }

    pub fn unauthenticated() -> Self {
        Self::new(StatusCode::UNAUTHORIZED, "unauthenticated", "missing, invalid or expired credentials")
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn validation(details: Vec<FieldError>) -> Self {
        let message = details.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        Self {
            details: Some(details),
            ..Self::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", message)
        }
    }

    pub fn invalid(code: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!(code = %self.code, "{}", self.message);
        }
        (status, Json(self)).into_response()
    }
}

impl From<WorkspaceError> for ApiError {
    fn from(e: WorkspaceError) -> Self {
        let msg = e.to_string();
        match e {
            WorkspaceError::Validation(_) => Self::invalid("validation", msg),
            WorkspaceError::Security(_) => Self::invalid("invalid_path", msg),
            WorkspaceError::Conflict(_) => Self::new(StatusCode::CONFLICT, "conflict", msg),
            WorkspaceError::Auth => Self::unauthenticated(),
            WorkspaceError::Quota { .. } => Self::new(StatusCode::PAYLOAD_TOO_LARGE, "quota_exceeded", msg),
            WorkspaceError::NotFound(_) => Self::not_found(msg),
            WorkspaceError::Corrupt(_) | WorkspaceError::Io(_) => Self::internal(msg),
        }
    }
}

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        match e {
            JobError::NotFound(_) => Self::not_found(e.to_string()),
            JobError::State { .. } => Self::new(StatusCode::CONFLICT, "state_conflict", e.to_string()),
            JobError::Invalid(details) => Self::validation(details),
            JobError::Workspace(w) => w.into(),
            JobError::Launch(_) => Self::new(StatusCode::BAD_GATEWAY, "launch_failed", e.to_string()),
            JobError::Protocol(_) | JobError::Io(_) => Self::internal(e.to_string()),
        }
    }
}

impl From<MetricsError> for ApiError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Invalid(details) => Self::validation(details),
            MetricsError::Parse(m) => Self::invalid("parse_error", m),
        }
    }
}

impl From<RecordError> for ApiError {
    fn from(e: RecordError) -> Self {
        match e {
            RecordError::Io { .. } => Self::internal(e.to_string()),
            _ => Self::invalid("record_error", e.to_string()),
        }
    }
}

impl From<ExportError> for ApiError {
    fn from(e: ExportError) -> Self {
        match e {
            ExportError::NotFound(m) => Self::not_found(m),
            ExportError::Invalid(m) => Self::invalid("validation", m),
            ExportError::Integrity { .. } => Self::internal(e.to_string()),
            ExportError::Job(j) => j.into(),
            ExportError::Workspace(w) => w.into(),
        }
    }
}

impl From<PreprocessError> for ApiError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::Invalid(details) => Self::validation(details),
            PreprocessError::Dataset(report) => {
                let mut details = Vec::new();
                for name in &report.missing_images {
                    details.push(FieldError {
                        field: format!("images/{name}"),
                        message: "image file not found".into(),
                    });
                }
                for name in &report.duplicate_filenames {
                    details.push(FieldError {
                        field: format!("annotations/{name}"),
                        message: "filename annotated more than once".into(),
                    });
                }
                for issue in &report.invalid_boxes {
                    details.push(FieldError {
                        field: format!("annotations/{}/boxes[{}]", issue.filename, issue.box_index),
                        message: issue.message.clone(),
                    });
                }
                Self {
                    code: "dataset_invalid".into(),
                    ..Self::validation(details)
                }
            }
            PreprocessError::Ingest { .. } => Self::invalid("parse_error", e.to_string()),
            PreprocessError::Augment(_) => Self::invalid("augment_error", e.to_string()),
            PreprocessError::Record(r) => r.into(),
            PreprocessError::Workspace(w) => w.into(),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        let status = e.status();
        let code = if status == StatusCode::UNSUPPORTED_MEDIA_TYPE { "unsupported_media_type" } else { "invalid_json" };
        let status = if status.is_client_error() { status } else { StatusCode::BAD_REQUEST };
        Self::new(status, code, e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_path", e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_query", e.body_text())
    }
}

impl From<BytesRejection> for ApiError {
    fn from(e: BytesRejection) -> Self {
        let status = if e.status().is_client_error() { e.status() } else { StatusCode::BAD_REQUEST };
        Self::new(status, "invalid_body", e.body_text())
    }
}
