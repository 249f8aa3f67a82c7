// SPDX-License-Identifier: Apache-2.0
//! JSON prediction service.
//!
//! `GET /health`, `POST /predict`, `POST /oracle` (opt-in) and `POST /rtcg`.
//! Requests carry a floorplan JSON body. The model loads in the background;
//! model routes answer 503 until it is ready.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};
use warpforge::floorplan::Floorplan;
use warpforge::laminate::{solve_plate_with, DeformationMap, OracleOptions};
use warpforge::model::{Model, ModelError};
use warpforge::rtcg::build_rtcg;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub with_oracle: bool,
    pub oracle: OracleOptions,
    /// Concurrent oracle solves; further requests wait.
    pub oracle_workers: usize,
    pub allow_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            with_oracle: false,
            oracle: OracleOptions::default(),
            oracle_workers: 1,
            allow_origins: Vec::new(),
        }
    }
}

pub struct AppState {
    model: OnceLock<Arc<Model>>,
    load_error: OnceLock<String>,
    config: ServiceConfig,
    oracle_slots: Semaphore,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            model: OnceLock::new(),
            load_error: OnceLock::new(),
            oracle_slots: Semaphore::new(config.oracle_workers.max(1)),
            config,
        })
    }

    pub fn with_model(model: Model, config: ServiceConfig) -> Arc<Self> {
        let s = Self::new(config);
        let _ = s.model.set(Arc::new(model));
        s
    }

    pub fn set_model(&self, model: Model) {
        let _ = self.model.set(Arc::new(model));
    }

    pub fn is_ready(&self) -> bool {
        self.model.get().is_some()
    }
}

/// Loads `path` on a blocking thread and installs it in `state`.
pub fn load_in_background(state: Arc<AppState>, path: PathBuf) {
    tokio::task::spawn_blocking(move || match Model::load(&path) {
        Ok((m, _)) => {
            log::info!("model loaded from {}", path.display());
            state.set_model(m);
        }
        Err(e) => {
            log::error!("model load failed: {e}");
            let _ = state.load_error.set(e.to_string());
        }
    });
}

struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, messages: Vec<String>) -> Self {
        Self {
            status,
            body: json!({ "error": error, "messages": messages }),
        }
    }

    fn invalid(messages: Vec<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid floorplan", messages)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidFloorplan(m) => Self::invalid(m),
            ModelError::Rtcg(e) => Self::invalid(vec![e.to_string()]),
            e => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "prediction failed", vec![e.to_string()]),
        }
    }
}

fn parse_floorplan(body: &[u8]) -> Result<Floorplan, ApiError> {
    let fp: Floorplan = serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "malformed floorplan json", vec![e.to_string()]))?;
    let report = fp.validate();
    if !report.is_ok() {
        return Err(ApiError::invalid(report.messages()));
    }
    Ok(fp)
}

#[derive(Serialize)]
pub struct MapResponse {
    pub height: usize,
    pub width: usize,
    pub dx: f64,
    pub dy: f64,
    /// Rows of µm values, row 0 at `y = 0`.
    pub map: Vec<Vec<f64>>,
    pub warpage_um: f64,
    pub argmax: (usize, usize),
    pub argmin: (usize, usize),
    pub inference_ms: f64,
}

impl MapResponse {
    pub fn new(m: &DeformationMap, ms: f64) -> Self {
        let w = m.warpage();
        Self {
            height: m.height,
            width: m.width,
            dx: m.dx,
            dy: m.dy,
            map: m.rows(),
            warpage_um: w.warpage,
            argmax: w.argmax,
            argmin: w.argmin,
            inference_ms: ms,
        }
    }
}

fn model_of(state: &AppState) -> Result<Arc<Model>, ApiError> {
    if let Some(m) = state.model.get() {
        return Ok(m.clone());
    }
    let messages = state.load_error.get().map(|e| vec![e.clone()]).unwrap_or_default();
    Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model loading", messages))
}

fn blocking_failed(e: tokio::task::JoinError) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker failed", vec![e.to_string()])
}

pub fn model_info(m: &Model) -> Value {
    json!({
        "encoder": m.config.encoder.kind,
        "layers": m.config.encoder.layers,
        "hidden": m.config.encoder.hidden,
        "grid": [m.config.grid_h, m.config.grid_w],
        "parameters": m.params.size(),
        "target_mean_um": m.norm.target_mean,
        "target_std_um": m.norm.target_std,
    })
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.model.get() {
        Some(m) => (
            StatusCode::OK,
            Json(json!({ "status": "ok", "model_info": model_info(m), "oracle": state.config.with_oracle })),
        )
            .into_response(),
        None => {
            let status = if state.load_error.get().is_some() { "failed" } else { "loading" };
            (
                StatusCode::SERVICE_UNAVAILABLE,
                Json(json!({ "status": status, "model_info": Value::Null, "error": state.load_error.get() })),
            )
                .into_response()
        }
    }
}

async fn predict(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<MapResponse>, ApiError> {
    let model = model_of(&state)?;
    let fp = parse_floorplan(&body)?;
    let (map, ms) = tokio::task::spawn_blocking(move || {
        let t = Instant::now();
        let map = model.predict(&fp);
        (map, t.elapsed().as_secs_f64() * 1e3)
    })
    .await
    .map_err(blocking_failed)?;
    Ok(Json(MapResponse::new(&map?, ms)))
}

async fn oracle(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<MapResponse>, ApiError> {
    if !state.config.with_oracle {
        return Err(ApiError::new(StatusCode::NOT_FOUND, "oracle disabled", vec!["start with --with-oracle".into()]));
    }
    let fp = parse_floorplan(&body)?;
    let _slot = state.oracle_slots.acquire().await.expect("semaphore open");
    let opts = state.config.oracle;
    let (sol, ms) = tokio::task::spawn_blocking(move || {
        let t = Instant::now();
        let sol = solve_plate_with(&fp, &opts);
        (sol, t.elapsed().as_secs_f64() * 1e3)
    })
    .await
    .map_err(blocking_failed)?;
    let sol = sol.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "oracle failed", vec![e.to_string()]))?;
    Ok(Json(MapResponse::new(&sol.map, ms)))
}

async fn rtcg(body: Bytes) -> Result<Json<Value>, ApiError> {
    let fp = parse_floorplan(&body)?;
    let g = build_rtcg(&fp).map_err(|e| ApiError::invalid(vec![e.to_string()]))?;
    Ok(Json(serde_json::to_value(g).expect("graph serializes")))
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut r = Router::new()
        .route("/health", get(health))
        .route("/predict", post(predict))
        .route("/oracle", post(oracle))
        .route("/rtcg", post(rtcg));
    let origins: Vec<HeaderValue> = state
        .config
        .allow_origins
        .iter()
        .filter_map(|o| match HeaderValue::from_str(o) {
            Ok(v) => Some(v),
            Err(_) => {
                log::warn!("ignoring invalid origin {o:?}");
                None
            }
        })
        .collect();
    if !origins.is_empty() {
        r = r.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::list(origins))
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([axum::http::header::CONTENT_TYPE]),
        );
    }
    r.with_state(state)
}
