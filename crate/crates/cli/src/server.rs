//! Review HTTP API over a shared [`ReviewService`].

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use forge_core::review::{Judgment, PairwiseJudgment, ReviewError, ReviewService};
use serde_json::json;
use tower_http::services::ServeDir;

const PLACEHOLDER_UI: &str = include_str!("../assets/index.html");

pub struct ApiError(StatusCode, String);

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let status =
            StatusCode::from_u16(e.status_code()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        ApiError(status, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if self.0.is_server_error() {
            log::error!("{}", self.1);
        }
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

type Shared = Arc<ReviewService>;

/// Builds the router. `ui` is a directory of built review-board assets;
/// without it `/` serves a short placeholder page.
pub fn router(service: Shared, ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/queue/next", get(next))
        .route("/api/judgment", post(judgment))
        .route("/api/pairwise", post(pairwise))
        .route("/api/report", get(report))
        .route("/api/export/negatives", get(negatives))
        .with_state(service);
    match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER_UI) })),
    }
}

async fn next(
    State(service): State<Shared>,
    Query(params): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let annotator = params
        .get("annotator")
        .map(String::as_str)
        .unwrap_or_default();
    Ok(Json(service.next(annotator)?).into_response())
}

async fn judgment(
    State(service): State<Shared>,
    body: Result<Json<Judgment>, JsonRejection>,
) -> Result<Json<Judgment>, ApiError> {
    let Json(j) = body?;
    // submits append and fsync the judgment file
    let stored = tokio::task::spawn_blocking(move || service.submit(j))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(stored))
}

async fn pairwise(
    State(service): State<Shared>,
    body: Result<Json<PairwiseJudgment>, JsonRejection>,
) -> Result<Json<PairwiseJudgment>, ApiError> {
    let Json(j) = body?;
    let mut stored = tokio::task::spawn_blocking(move || service.submit_pairwise(j))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    // the annotator stays blind to which system produced which side
    stored.left_system = None;
    stored.right_system = None;
    Ok(Json(stored))
}

async fn report(State(service): State<Shared>) -> Response {
    Json(service.report()).into_response()
}

async fn negatives(State(service): State<Shared>) -> Result<Response, ApiError> {
    let body = forge_core::util::to_jsonl(service.export_negatives())
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}
