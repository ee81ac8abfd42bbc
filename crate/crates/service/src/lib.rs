//! Read-only HTTP API over a directory of persisted task graphs.
//!
//! Every request re-reads the directory, so the service holds no mutable state
//! and always reflects the files on disk.

use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tower_http::cors::{AllowOrigin, CorsLayer};
use vmx_core::graph::{self, task_slug, TaskGraph};

/// Published response schemas, keyed by endpoint then status code.
pub const API_SCHEMA: &str = include_str!("../api-schema.json");

/// Tolerance for a clip ending past the recorded video duration.
const DURATION_SLACK_S: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub graphs_dir: PathBuf,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
}

impl ServiceConfig {
    pub fn new(graphs_dir: impl Into<PathBuf>) -> Self {
        Self {
            graphs_dir: graphs_dir.into(),
            cors_origin: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    InvalidRange(String),
    #[error("storage failure: {0}")]
    Storage(#[from] io::Error),
    #[error("invalid CORS origin {0:?}")]
    Origin(String),
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::InvalidRange(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Storage(_) | ServiceError::Origin(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %self, "request failed");
        }
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_name: String,
    pub task_slug: String,
    pub outcome_count: usize,
    pub video_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRef {
    pub video_id: String,
    pub playback_ref: String,
    pub start_s: f64,
    pub end_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
}

/// Loads every readable graph in `dir`, sorted by task name. Unreadable or
/// invalid files are skipped with a warning.
pub fn load_graphs(dir: &Path) -> io::Result<Vec<TaskGraph>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut graphs: Vec<TaskGraph> = paths
        .iter()
        .filter_map(|p| match graph::load(p) {
            Ok(g) => Some(g),
            Err(e) => {
                tracing::warn!(path = %p.display(), error = %e, "skipping unreadable graph");
                None
            }
        })
        .collect();
    graphs.sort_by(|a, b| a.task_name.cmp(&b.task_name));
    Ok(graphs)
}

/// Finds a graph by slug or exact task name.
pub fn find_graph(dir: &Path, task: &str) -> Result<TaskGraph, ServiceError> {
    let direct = dir.join(format!("{}.json", task_slug(task)));
    if let Ok(g) = graph::load(&direct) {
        if g.task_name == task || task_slug(&g.task_name) == task {
            return Ok(g);
        }
    }
    load_graphs(dir)?
        .into_iter()
        .find(|g| g.task_name == task || task_slug(&g.task_name) == task)
        .ok_or_else(|| ServiceError::NotFound(format!("unknown task {task:?}")))
}

pub fn list_tasks(dir: &Path) -> Result<Vec<TaskSummary>, ServiceError> {
    Ok(load_graphs(dir)?
        .iter()
        .map(|g| TaskSummary {
            task_name: g.task_name.clone(),
            task_slug: task_slug(&g.task_name),
            outcome_count: g.outcome_clusters.len(),
            video_count: g.videos.len(),
        })
        .collect())
}

/// Strong ETag over the canonical body.
pub fn etag(body: &[u8]) -> String {
    format!("\"{}\"", hex::encode(Sha256::digest(body)))
}

fn etag_matches(headers: &HeaderMap, tag: &str) -> bool {
    headers
        .get_all(header::IF_NONE_MATCH)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .map(|t| t.trim().trim_start_matches("W/"))
        .any(|t| t == "*" || t == tag)
}

#[derive(Debug, Default, Deserialize)]
pub struct ClipQuery {
    pub start_s: Option<String>,
    pub end_s: Option<String>,
    /// Restricts the lookup to one task when a video appears in several.
    pub task: Option<String>,
}

fn parse_bound(name: &str, raw: Option<&str>) -> Result<f64, ServiceError> {
    let raw = raw.ok_or_else(|| ServiceError::InvalidRange(format!("missing {name}")))?;
    match raw.trim().parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(ServiceError::InvalidRange(format!("{name} is not a finite number: {raw:?}"))),
    }
}

pub fn resolve_clip(dir: &Path, video_id: &str, q: &ClipQuery) -> Result<ClipRef, ServiceError> {
    let graphs = match &q.task {
        Some(task) => vec![find_graph(dir, task)?],
        None => load_graphs(dir)?,
    };
    let (g, video) = graphs
        .iter()
        .find_map(|g| g.video(video_id).map(|v| (g, v)))
        .ok_or_else(|| ServiceError::NotFound(format!("unknown video {video_id:?}")))?;
    let start_s = parse_bound("start_s", q.start_s.as_deref())?;
    let end_s = parse_bound("end_s", q.end_s.as_deref())?;
    if start_s < 0.0 || start_s >= end_s {
        return Err(ServiceError::InvalidRange(format!(
            "expected 0 <= start_s < end_s, got {start_s}..{end_s}"
        )));
    }
    if video.duration_s > 0.0 && end_s > video.duration_s + DURATION_SLACK_S {
        return Err(ServiceError::InvalidRange(format!(
            "end_s {end_s} is past the video end {}",
            video.duration_s
        )));
    }
    Ok(ClipRef {
        video_id: video.video_id.clone(),
        playback_ref: video.playback_ref.clone(),
        start_s,
        end_s,
        summary: g.clip_summary(video_id, start_s, end_s).map(str::to_string),
    })
}

type Shared = Arc<ServiceConfig>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Storage(io::Error::other(e)))?
}

async fn tasks_handler(State(cfg): State<Shared>) -> Result<Json<Vec<TaskSummary>>, ServiceError> {
    blocking(move || list_tasks(&cfg.graphs_dir)).await.map(Json)
}

async fn graph_handler(
    State(cfg): State<Shared>,
    UrlPath(task): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Response, ServiceError> {
    let g = blocking(move || find_graph(&cfg.graphs_dir, &task)).await?;
    let body = g.to_canonical_string();
    let tag = etag(body.as_bytes());
    let tag_header = HeaderValue::from_str(&tag).expect("hex etag is a valid header");
    if etag_matches(&headers, &tag) {
        return Ok((StatusCode::NOT_MODIFIED, [(header::ETAG, tag_header)]).into_response());
    }
    Ok((
        StatusCode::OK,
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("application/json")),
            (header::ETAG, tag_header),
        ],
        body,
    )
        .into_response())
}

async fn clip_handler(
    State(cfg): State<Shared>,
    UrlPath(video_id): UrlPath<String>,
    Query(q): Query<ClipQuery>,
) -> Result<Json<ClipRef>, ServiceError> {
    blocking(move || resolve_clip(&cfg.graphs_dir, &video_id, &q)).await.map(Json)
}

pub fn router(config: ServiceConfig) -> Result<Router, ServiceError> {
    let origin = match &config.cors_origin {
        None => AllowOrigin::any(),
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o).map_err(|_| ServiceError::Origin(o.clone()))?),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET])
        .allow_headers([header::IF_NONE_MATCH])
        .expose_headers([header::ETAG]);
    Ok(Router::new()
        .route("/api/tasks", get(tasks_handler))
        .route("/api/tasks/{task}/graph", get(graph_handler))
        .route("/api/clips/{video_id}", get(clip_handler))
        .layer(cors)
        .with_state(Arc::new(config)))
}

/// Serves until the process is stopped.
pub async fn serve(config: ServiceConfig, port: u16) -> io::Result<()> {
    let app = router(config).map_err(io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(SocketAddr::from(([0, 0, 0, 0], port))).await?;
    tracing::info!(addr = %listener.local_addr()?, "task service listening");
    axum::serve(listener, app).await
}
