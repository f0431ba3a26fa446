use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use stampgen::StampError;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    Unprocessable(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("model {0:?} is still loading")]
    Loading(String),
    #[error("inference queue is full")]
    QueueFull,
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Self::UnknownModel(_) | Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Loading(_) => StatusCode::SERVICE_UNAVAILABLE,
            Self::QueueFull => StatusCode::TOO_MANY_REQUESTS,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl From<StampError> for ApiError {
    fn from(e: StampError) -> Self {
        match e {
            StampError::InvalidBox(_)
            | StampError::EmptyMask
            | StampError::Dimension(_)
            | StampError::InvalidValue(_)
            | StampError::Config(_)
            | StampError::Image(_) => Self::Unprocessable(e.to_string()),
            other => Self::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = self.status();
        if status.is_server_error() {
            log::error!("{self}");
        }
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}
