use std::sync::Arc;

use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nimbus_core::backend::{BackendError, ClaimedAssignment};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::broker::{image_url, Broker, CreateTaskRequest, ServiceError, SubmitRequest};
use crate::images::ImageError;

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

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
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let msg = e.to_string();
        match e {
            ServiceError::InvalidImage(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_image", msg),
            ServiceError::InvalidConfig(_) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", msg),
            ServiceError::Halted => Self::new(StatusCode::SERVICE_UNAVAILABLE, "unavailable", msg),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_failure", msg),
        }
    }
}

impl From<BackendError> for ApiError {
    fn from(e: BackendError) -> Self {
        let msg = e.to_string();
        let (status, code) = match e {
            BackendError::UnknownAssignment(_) => (StatusCode::NOT_FOUND, "not_found"),
            BackendError::AlreadySubmitted(_) => (StatusCode::CONFLICT, "already_submitted"),
            BackendError::Expired(_) => (StatusCode::GONE, "expired"),
            BackendError::NotClaimed(_) => (StatusCode::CONFLICT, "not_claimed"),
            BackendError::InvalidBox(_) => (StatusCode::BAD_REQUEST, "invalid_box"),
            _ => (StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable"),
        };
        Self::new(status, code, msg)
    }
}

type AppState = Arc<Broker>;

pub fn router(broker: Arc<Broker>) -> Router {
    let limit = broker.config().max_image_bytes + (64 << 10);
    let mut app = Router::new()
        .route("/api/health", get(health))
        .route("/api/tasks", post(create_task).get(list_tasks))
        .route("/api/tasks/{id}", get(get_task))
        .route("/api/images/{id}", get(get_image))
        .route("/api/work/next", get(next_assignment))
        .route("/api/work/{assignment_id}/response", post(submit_response))
        .layer(DefaultBodyLimit::max(limit));
    if let Some(dir) = &broker.config().worker_ui_dir {
        let index = dir.join("index.html");
        app = app.nest_service(
            "/worker",
            ServeDir::new(dir).append_index_html_on_directories(true).fallback(tower_http::services::ServeFile::new(index)),
        );
    }
    app.with_state(broker)
}

async fn health(State(b): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "backend_kind": b.backend_kind() }))
}

#[derive(Serialize, Deserialize)]
pub struct CreatedTask {
    pub task_id: String,
}

async fn create_task(
    State(b): State<AppState>,
    headers: HeaderMap,
    multipart: Result<Multipart, MultipartRejection>,
) -> Result<Response, ApiError> {
    let bad_image = |m: String| ApiError::new(StatusCode::BAD_REQUEST, "invalid_image", m);
    let mut multipart = multipart.map_err(|e| bad_image(format!("expected multipart body: {e}")))?;
    let mut image: Option<Vec<u8>> = None;
    let mut req = CreateTaskRequest::default();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| bad_image(e.to_string()))?
    {
        match field.name() {
            Some("image") => {
                image = Some(field.bytes().await.map_err(|e| bad_image(e.to_string()))?.to_vec());
            }
            Some("config") => {
                let text = field.text().await.map_err(|e| bad_image(e.to_string()))?;
                req = serde_json::from_str(&text).map_err(|e| {
                    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_config", e.to_string())
                })?;
            }
            _ => {}
        }
    }
    let image = image.ok_or_else(|| bad_image("missing image part".into()))?;
    let key = headers
        .get(IDEMPOTENCY_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned);
    let broker = Arc::clone(&b);
    let (task_id, created) = tokio::task::spawn_blocking(move || broker.create_task(&image, req, key))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_failure", e.to_string()))??;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(CreatedTask { task_id })).into_response())
}

async fn list_tasks(State(b): State<AppState>) -> Response {
    Json(b.list_tasks()).into_response()
}

async fn get_task(State(b): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    b.get_task(&id)
        .map(|v| Json(v).into_response())
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no task {id}")))
}

async fn get_image(State(b): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no image {id}"));
    let meta = b.snapshot(&id).ok_or_else(not_found)?;
    let bytes = b.image_bytes(&id).map_err(|e| match e {
        ImageError::HashMismatch(_) => {
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "storage_failure", e.to_string())
        }
        _ => not_found(),
    })?;
    Ok(([(header::CONTENT_TYPE, meta.content_type)], bytes).into_response())
}

#[derive(Deserialize)]
struct NextQuery {
    worker_id: String,
}

/// A claimed assignment plus where to fetch its image.
#[derive(Serialize, Deserialize)]
pub struct AssignmentPayload {
    #[serde(flatten)]
    pub claimed: ClaimedAssignment,
    pub image_url: String,
}

async fn next_assignment(State(b): State<AppState>, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    if q.worker_id.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_worker", "worker_id is required"));
    }
    Ok(match b.next_assignment(&q.worker_id) {
        Some(claimed) => {
            let image_url = image_url(&claimed.assignment.snapshot_ref);
            Json(AssignmentPayload { claimed, image_url }).into_response()
        }
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit_response(
    State(b): State<AppState>,
    Path(assignment_id): Path<String>,
    body: Result<Json<SubmitRequest>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_box", e.body_text()))?;
    let ack = b.submit(&assignment_id, req)?;
    Ok(Json(ack).into_response())
}
