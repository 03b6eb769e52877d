use std::path::PathBuf;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use mois_core::inference::InferenceError;
use mois_core::io::IoError;
use mois_core::model::ModelError;
use mois_core::rle::RleError;
use mois_core::snapshot::SnapshotError;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("environment override {0} does not fit the config layout")]
    Env(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("stale revision: expected {current}, got {supplied}")]
    Conflict { current: u64, supplied: u64 },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Unavailable(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            Self::NotFound(_) => StatusCode::NOT_FOUND,
            Self::Conflict { .. } => StatusCode::CONFLICT,
            Self::Invalid(_) => StatusCode::BAD_REQUEST,
            Self::Unavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            Self::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

impl From<InferenceError> for ApiError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::OutOfBounds { .. } | InferenceError::NotPrompted(_) => Self::Invalid(e.to_string()),
            InferenceError::UnknownLesion(l) => Self::NotFound(format!("lesion {l}")),
            InferenceError::Model(m) => Self::Internal(m.to_string()),
        }
    }
}

impl From<IoError> for ApiError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io(_) => Self::Internal(e.to_string()),
            _ => Self::Invalid(e.to_string()),
        }
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        Self::Internal(e.to_string())
    }
}

impl From<SnapshotError> for ApiError {
    fn from(e: SnapshotError) -> Self {
        Self::Internal(e.to_string())
    }
}

impl From<RleError> for ApiError {
    fn from(e: RleError) -> Self {
        Self::Internal(e.to_string())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("loading model {path}: {source}")]
    Model { path: PathBuf, source: ModelError },
    #[error("restoring persisted state: {0}")]
    Restore(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
