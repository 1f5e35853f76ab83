//! HTTP tile service. Clients open view sessions on datasets and poll tiles,
//! which refine from previews to final images while the parameters stay the
//! same.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/datasets` | dataset list |
//! | POST | `/sessions` | `{dataset, kind, params}` → `{session, generation}` |
//! | PUT | `/sessions/{id}/params` | replaces the parameters → `{generation}` |
//! | GET | `/sessions/{id}/tile?x=&y=&gen=` | PNG with `X-State` and `X-Generation` |
//! | GET | `/sessions/{id}/status` | tile counts, bytes read, store occupancy |

mod engine;
mod image;
mod params;

use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::sync::oneshot;

use tessera::{DataState, EngineConfig, Result};

pub use engine::{ApiError, DatasetInfo, SessionCreated, SessionStatus, StoreOccupancy};
pub use image::{encode_png, tile_pixels};
pub use params::{build_view, ViewKind, ViewParams, MAX_FRAME_SIDE};

use engine::Command;

/// Environment variable holding the listen address; `--listen` wins.
pub const LISTEN_ENV: &str = "TESSERA_LISTEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_TILE_SIZE: u64 = 512;

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub manifests: Vec<PathBuf>,
    pub tile_size: u64,
    pub engine: EngineConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            manifests: Vec::new(),
            tile_size: DEFAULT_TILE_SIZE,
            engine: EngineConfig::default(),
        }
    }
}

/// The listen address: `flag` if given, else [`LISTEN_ENV`], else
/// [`DEFAULT_LISTEN`].
pub fn listen_address(flag: Option<&str>) -> String {
    flag.map(str::to_string)
        .or_else(|| std::env::var(LISTEN_ENV).ok().filter(|s| !s.is_empty()))
        .unwrap_or_else(|| DEFAULT_LISTEN.to_string())
}

/// A running engine thread shared by all sessions.
#[derive(Clone)]
pub struct Service {
    tx: Arc<Mutex<mpsc::Sender<Command>>>,
}

impl Service {
    /// Opens every manifest and starts the engine thread.
    pub fn start(config: ServiceConfig) -> Result<Service> {
        let tx = engine::spawn(config.engine, config.manifests, config.tile_size)?;
        Ok(Service {
            tx: Arc::new(Mutex::new(tx)),
        })
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/datasets", get(datasets))
            .route("/sessions", post(create_session))
            .route("/sessions/{id}/params", put(update_params))
            .route("/sessions/{id}/tile", get(tile))
            .route("/sessions/{id}/status", get(status))
            .with_state(self.clone())
    }

    async fn call<T>(&self, make: impl FnOnce(oneshot::Sender<T>) -> Command) -> std::result::Result<T, ApiError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .lock()
            .expect("sender lock")
            .send(make(reply))
            .map_err(|_| ApiError::new(503, "engine stopped"))?;
        rx.await.map_err(|_| ApiError::new(500, "engine dropped the request"))
    }
}

/// Serves `service` on `listener` until the process ends.
pub async fn serve(service: Service, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, service.router()).await
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut body = serde_json::json!({ "error": self.message });
        if let Some(g) = self.generation {
            body["generation"] = g.into();
        }
        (status, Json(body)).into_response()
    }
}

fn bad_json(e: JsonRejection) -> ApiError {
    ApiError::new(400, e.body_text())
}

async fn datasets(State(s): State<Service>) -> std::result::Result<Json<Vec<DatasetInfo>>, ApiError> {
    Ok(Json(s.call(Command::Datasets).await?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateBody {
    dataset: String,
    kind: ViewKind,
    #[serde(default)]
    params: ViewParams,
}

async fn create_session(
    State(s): State<Service>,
    body: std::result::Result<Json<CreateBody>, JsonRejection>,
) -> std::result::Result<Json<SessionCreated>, ApiError> {
    let Json(b) = body.map_err(bad_json)?;
    let created = s
        .call(|reply| Command::CreateSession {
            dataset: b.dataset,
            kind: b.kind,
            params: b.params,
            reply,
        })
        .await??;
    Ok(Json(created))
}

async fn update_params(
    State(s): State<Service>,
    Path(id): Path<String>,
    body: std::result::Result<Json<ViewParams>, JsonRejection>,
) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    let Json(params) = body.map_err(bad_json)?;
    let generation = s
        .call(|reply| Command::UpdateParams {
            session: id,
            params,
            reply,
        })
        .await??;
    Ok(Json(serde_json::json!({ "generation": generation })))
}

#[derive(Deserialize)]
struct TileQuery {
    x: u64,
    y: u64,
    gen: Option<u64>,
}

async fn tile(
    State(s): State<Service>,
    Path(id): Path<String>,
    q: std::result::Result<Query<TileQuery>, axum::extract::rejection::QueryRejection>,
) -> std::result::Result<Response, ApiError> {
    let Query(q) = q.map_err(|e| ApiError::new(400, e.body_text()))?;
    let t = s
        .call(|reply| Command::Tile {
            session: id,
            x: q.x,
            y: q.y,
            generation: q.gen,
            reply,
        })
        .await??;
    let state = if t.state == DataState::Final { "final" } else { "preview" };
    let mut r = Bytes::from(t.png.as_ref().clone()).into_response();
    let h = r.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    h.insert("x-state", HeaderValue::from_static(state));
    h.insert("x-generation", HeaderValue::from(t.generation));
    Ok(r)
}

async fn status(
    State(s): State<Service>,
    Path(id): Path<String>,
) -> std::result::Result<Json<SessionStatus>, ApiError> {
    Ok(Json(s.call(|reply| Command::Status { session: id, reply }).await??))
}
