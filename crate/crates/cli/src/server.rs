//! HTTP API of the refinement service.
//!
//! Reads take a snapshot of the session model and run concurrently.
//! Mutations (stroke, imprint, reset) hold the session's write lock for
//! their whole duration, so they apply in some sequential order.

use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::RwLock;
use touchprint::imprinting::PoolingMethod;

use crate::render;
use crate::session::{segmentation, Point, Session, SessionError};

pub type SharedSession = Arc<RwLock<Session>>;

pub fn router(session: Session) -> Router {
    let state: SharedSession = Arc::new(RwLock::new(session));
    Router::new()
        .route("/api/scenes", get(scenes))
        .route("/api/scene/{id}", get(scene_png))
        .route("/api/segmentation/{id}", get(segmentation_png))
        .route("/api/stroke", post(stroke))
        .route("/api/imprint", post(imprint))
        .route("/api/reset", post(reset))
        .route("/api/metrics", get(metrics))
        .with_state(state)
}

pub async fn serve(session: Session, port: u16) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(session)).await?;
    Ok(())
}

pub struct ApiError(SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError(e)
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        ApiError(SessionError::Internal(format!("{e:#}")))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            SessionError::InvalidInput(_) => (StatusCode::BAD_REQUEST, "InvalidInput"),
            SessionError::NotFound(_) => (StatusCode::NOT_FOUND, "NotFound"),
            SessionError::EmptyMask => (StatusCode::UNPROCESSABLE_ENTITY, "EmptyMask"),
            SessionError::Unprocessable(_) => (StatusCode::UNPROCESSABLE_ENTITY, "Unprocessable"),
            SessionError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "Internal"),
        };
        (status, Json(json!({ "error": kind, "message": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(SessionError::Internal(e.to_string())))?
}

async fn scenes(State(state): State<SharedSession>) -> Json<serde_json::Value> {
    let s = state.read().await;
    Json(json!({ "scenes": s.scenes(), "activeScene": s.active_scene() }))
}

async fn scene_png(State(state): State<SharedSession>, Path(id): Path<String>) -> ApiResult<Response> {
    let rgb = state.read().await.scene(&id)?.rgb.clone();
    Ok(png(render::rgb_png(&rgb)?))
}

async fn segmentation_png(
    State(state): State<SharedSession>,
    Path(id): Path<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let (model, scene) = {
        let s = state.read().await;
        (s.model(), s.scene(&id)?.clone())
    };
    blocking(move || {
        let labels = segmentation(&model, &scene)?;
        Ok(Json(json!({
            "sceneId": id,
            "width": labels.width(),
            "height": labels.height(),
            "png": BASE64.encode(render::indexed_png(&labels)?),
            "palette": render::palette(),
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct StrokeRequest {
    scene_id: String,
    points: Vec<Point>,
}

async fn stroke(State(state): State<SharedSession>, Json(req): Json<StrokeRequest>) -> ApiResult<Json<serde_json::Value>> {
    let mut session = state.clone().write_owned().await;
    blocking(move || {
        let out = session.apply_stroke(&req.scene_id, &req.points)?;
        Ok(Json(json!({
            "maskPreview": BASE64.encode(render::mask_png(&out.mask)?),
            "pixelCount": out.mask.count(),
            "markedVoxels": out.marked_voxels,
            "skipped": out.skipped,
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct ImprintRequest {
    method: String,
}

async fn imprint(State(state): State<SharedSession>, Json(req): Json<ImprintRequest>) -> ApiResult<Json<serde_json::Value>> {
    let method: PoolingMethod = req
        .method
        .parse()
        .map_err(|_| SessionError::InvalidInput(format!("unknown method {:?}; use \"map\" or \"rap\"", req.method)))?;
    let mut session = state.clone().write_owned().await;
    blocking(move || Ok(Json(serde_json::to_value(session.imprint(method)?).map_err(anyhow::Error::from)?))).await
}

async fn reset(State(state): State<SharedSession>) -> Json<serde_json::Value> {
    state.write().await.reset();
    Json(json!({}))
}

async fn metrics(State(state): State<SharedSession>) -> Json<serde_json::Value> {
    let s = state.read().await;
    Json(serde_json::to_value(s.metrics()).unwrap_or_default())
}
