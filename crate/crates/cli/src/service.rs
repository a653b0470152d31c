//! HTTP audit API over a read-only registry.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use mint_core::audit::{audit_sample, upload_id, AuditError, AuditRegistry, ConfigurationInfo, MembershipReport};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

/// JSON Schema of every response body, one `$defs` entry per shape.
pub const API_SCHEMA: &str = include_str!("../schema/api.schema.json");

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// Audits computed at once; further requests wait.
    pub max_concurrent: usize,
    pub max_upload_bytes: usize,
    /// Uploads are kept only when this is set.
    pub retain_uploads: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_concurrent: 4,
            max_upload_bytes: 8 << 20,
            retain_uploads: None,
        }
    }
}

#[derive(Clone)]
struct AppState {
    registry: Arc<AuditRegistry>,
    permits: Arc<Semaphore>,
    config: Arc<ServiceConfig>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error_code: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub models: usize,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn too_large(limit: usize) -> Self {
        Self::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "payload_too_large",
            format!("upload exceeds {limit} bytes"),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error_code: self.code.into(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<AuditError> for ApiError {
    fn from(e: AuditError) -> Self {
        match e {
            AuditError::UnknownModel(_) => Self::new(StatusCode::NOT_FOUND, "unknown_model", e.to_string()),
            AuditError::Undecodable(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "undecodable_image", e.to_string())
            }
            AuditError::NoScores(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "audit_failed", e.to_string()),
        }
    }
}

pub fn router(registry: Arc<AuditRegistry>, config: ServiceConfig) -> Router {
    let limit = config.max_upload_bytes;
    let state = AppState {
        registry,
        permits: Arc::new(Semaphore::new(config.max_concurrent.max(1))),
        config: Arc::new(config),
    };
    Router::new()
        .route("/api/health", get(health))
        .route("/api/models", get(models))
        .route("/api/audit", post(audit))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        models: state.registry.model_count(),
    })
}

async fn models(State(state): State<AppState>) -> Json<Vec<ConfigurationInfo>> {
    Json(state.registry.configurations())
}

#[derive(Debug, Default, Deserialize)]
struct AuditQuery {
    model_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct JsonAudit {
    image_b64: Option<String>,
    model_id: Option<String>,
}

const RAW_IMAGE_TYPES: &[&str] = &["image/png", "image/x-portable-graymap", "application/octet-stream"];

async fn audit(
    State(state): State<AppState>,
    Query(query): Query<AuditQuery>,
    request: Request,
) -> Result<Json<MembershipReport>, ApiError> {
    let limit = state.config.max_upload_bytes;
    let mime = request
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map(|v| v.split(';').next().unwrap_or("").trim().to_ascii_lowercase());
    let headers = request.headers().clone();
    let body = read_body(request, &state, limit).await?;
    if body.is_empty() {
        return Err(empty());
    }
    let (image, model_id) = match mime.as_deref() {
        Some("multipart/form-data") => {
            let mut rebuilt = Request::new(Body::from(body));
            *rebuilt.headers_mut() = headers;
            read_multipart(rebuilt, &state, limit).await?
        }
        Some("application/json") => {
            let parsed: JsonAudit = serde_json::from_slice(&body)
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_json", e.to_string()))?;
            let b64 = parsed
                .image_b64
                .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing_image", "field image_b64 is required"))?;
            let image = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_base64", e.to_string()))?;
            (image, parsed.model_id)
        }
        Some(m) if RAW_IMAGE_TYPES.contains(&m) => (body.to_vec(), None),
        other => {
            return Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                "unsupported_media_type",
                format!(
                    "content type {} is not accepted; use multipart/form-data or application/json",
                    other.unwrap_or("(none)")
                ),
            ));
        }
    };
    if image.is_empty() {
        return Err(empty());
    }
    let model_id = model_id.or(query.model_id).filter(|m| !m.is_empty());
    if let Some(dir) = &state.config.retain_uploads {
        let path = dir.join(format!("{}.img", upload_id(&image)));
        if let Err(e) = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(&path, &image)) {
            log::warn!("could not retain upload at {}: {e}", path.display());
        }
    }
    let _permit = state
        .permits
        .clone()
        .acquire_owned()
        .await
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "audit_failed", e.to_string()))?;
    let registry = state.registry.clone();
    let report = tokio::task::spawn_blocking(move || audit_sample(&registry, &image, model_id.as_deref()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "audit_failed", e.to_string()))??;
    Ok(Json(report))
}

fn empty() -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, "empty_payload", "request carries no image bytes")
}

async fn read_body(request: Request, state: &AppState, limit: usize) -> Result<Bytes, ApiError> {
    Bytes::from_request(request, state).await.map_err(|e| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::too_large(limit)
        } else {
            ApiError::new(e.status(), "invalid_body", e.body_text())
        }
    })
}

async fn read_multipart(
    request: Request,
    state: &AppState,
    limit: usize,
) -> Result<(Vec<u8>, Option<String>), ApiError> {
    let bad = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::too_large(limit)
        } else {
            ApiError::new(StatusCode::BAD_REQUEST, "invalid_multipart", e.body_text())
        }
    };
    let mut form = Multipart::from_request(request, state)
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_multipart", e.body_text()))?;
    let mut image = None;
    let mut model_id = None;
    while let Some(field) = form.next_field().await.map_err(bad)? {
        match field.name() {
            Some("image") => image = Some(field.bytes().await.map_err(bad)?.to_vec()),
            Some("model_id") => model_id = Some(field.text().await.map_err(bad)?),
            _ => {}
        }
    }
    match image {
        Some(bytes) => Ok((bytes, model_id)),
        None => Err(ApiError::new(StatusCode::BAD_REQUEST, "missing_image", "multipart field image is required")),
    }
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(registry: AuditRegistry, config: ServiceConfig, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    println!(
        "{}",
        serde_json::json!({"command": "serve", "listening": local.to_string(), "models": registry.model_count()})
    );
    log::info!("serving {} models on {local}", registry.model_count());
    axum::serve(listener, router(Arc::new(registry), config)).await
}
