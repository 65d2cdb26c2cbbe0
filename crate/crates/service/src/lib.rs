//! HTTP front end for one checkpoint: draw samples, rescale their principal
//! components and propagate pixel edits. Each sample opens a session that
//! holds the decoded distribution, its noise and the current image.

mod error;
mod sessions;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, Method};
use axum::routing::{any, get, post};
use axum::{Json, Router};
use nalgebra::DVector;
use serde::de::DeserializeOwned;
use tokio::net::TcpListener;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use sosvae::api::{
    encode_bytes, encode_f64s, EditRequest, EditResponse, ModelInfo, SampleRequest, SampleResponse, ScaleRequest,
    ScaleResponse, SessionDebug,
};
use sosvae::checkpoint::Checkpoint;
use sosvae::data::ImageShape;
use sosvae::models::Model;
use sosvae::render::png_bytes;
use sosvae::workflow::Draw;

pub use error::ApiError;
pub use sessions::{Session, SessionStore, DEFAULT_SESSION_CAPACITY};

pub const DEFAULT_CORS_ORIGIN: &str = "http://localhost:5173";

/// Read-only model plus the session table.
pub struct AppState {
    model: Model,
    shape: ImageShape,
    info: ModelInfo,
    sessions: SessionStore,
}

impl AppState {
    pub fn new(ckpt: Checkpoint, session_capacity: usize) -> Self {
        let info = ModelInfo::of(&ckpt);
        Self {
            shape: ckpt.header.image_shape,
            model: ckpt.model,
            info,
            sessions: SessionStore::new(session_capacity),
        }
    }

    pub fn info(&self) -> &ModelInfo {
        &self.info
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }
}

#[derive(Debug, Clone)]
pub struct RouterOptions {
    /// Served under `/` for anything outside `/api`.
    pub static_dir: Option<PathBuf>,
    pub cors_origins: Vec<String>,
}

impl Default for RouterOptions {
    fn default() -> Self {
        Self {
            static_dir: None,
            cors_origins: vec![DEFAULT_CORS_ORIGIN.to_string()],
        }
    }
}

pub fn router(state: Arc<AppState>, options: &RouterOptions) -> Result<Router, ApiError> {
    let origins = options
        .cors_origins
        .iter()
        .map(|o| HeaderValue::from_str(o).map_err(|_| ApiError::BadRequest(format!("bad CORS origin {o:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let api = Router::new()
        .route("/api/model", get(model_info))
        .route("/api/sample", post(sample))
        .route("/api/scale", post(scale))
        .route("/api/edit", post(edit))
        .route("/api/session/{id}/debug", get(debug))
        .route("/api/{*rest}", any(unknown_api))
        .with_state(state);
    let app = match &options.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(unknown),
    };
    Ok(app.layer(cors))
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}

/// Serve until `shutdown` resolves.
pub async fn run(
    listener: TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

fn finite(what: &str, v: &DVector<f64>) -> Result<(), ApiError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ApiError::Internal(format!("{what} has non-finite entries")))
    }
}

fn png(values: &DVector<f64>, shape: ImageShape) -> Result<String, ApiError> {
    Ok(encode_bytes(&png_bytes(values.as_slice(), shape)?))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker failed: {e}")))?
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<ModelInfo> {
    Json(state.info.clone())
}

async fn sample(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SampleResponse>, ApiError> {
    let req: SampleRequest = parse(&body)?;
    let worker = state.clone();
    let (draw, sample, mean_png, sample_png) = blocking(move || {
        let draw = Draw::new(&worker.model, req.seed)?;
        let sample = draw.sample()?;
        finite("mean", draw.mean())?;
        finite("sample", &sample)?;
        let mean_png = png(draw.mean(), worker.shape)?;
        let sample_png = png(&sample, worker.shape)?;
        Ok((draw, sample, mean_png, sample_png))
    })
    .await?;
    let mean = encode_f64s(draw.mean().as_slice());
    let encoded = encode_f64s(sample.as_slice());
    let session_id = state.sessions.insert(Session::new(draw, sample));
    tracing::debug!(%session_id, seed = req.seed, "new session");
    Ok(Json(SampleResponse {
        session_id,
        mean,
        sample: encoded,
        mean_png,
        sample_png,
    }))
}

async fn scale(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<ScaleResponse>, ApiError> {
    let req: ScaleRequest = parse(&body)?;
    let session = state.sessions.get(&req.session_id)?.lock_owned().await;
    let shape = state.shape;
    blocking(move || {
        let image = session.draw.scaled_sample(&req.coefficients)?;
        finite("scaled sample", &image)?;
        Ok(Json(ScaleResponse {
            sample: encode_f64s(image.as_slice()),
            sample_png: png(&image, shape)?,
        }))
    })
    .await
}

async fn edit(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<EditResponse>, ApiError> {
    let req: EditRequest = parse(&body)?;
    let mut session = state.sessions.get(&req.session_id)?.lock_owned().await;
    let shape = state.shape;
    blocking(move || {
        let base = if req.reset { &session.original } else { &session.current };
        let image = session.draw.edit(base, &req.edits, shape)?;
        finite("conditioned image", &image)?;
        let response = EditResponse {
            conditioned_image: encode_f64s(image.as_slice()),
            conditioned_png: png(&image, shape)?,
        };
        session.current = image;
        Ok(Json(response))
    })
    .await
}

async fn debug(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionDebug>, ApiError> {
    let session = state.sessions.get(&id)?.lock_owned().await;
    let dist = &session.draw.dist;
    let noise = &session.draw.noise;
    Ok(Json(SessionDebug {
        dim: dist.dim(),
        rank: dist.rank(),
        mu: encode_f64s(dist.mu().as_slice()),
        cov_factor: encode_f64s(dist.cov_factor().as_slice()),
        cov_diag: encode_f64s(dist.cov_diag().as_slice()),
        omega_p: encode_f64s(noise.omega_p.as_slice()),
        omega_d: encode_f64s(noise.omega_d.as_slice()),
        current: encode_f64s(session.current.as_slice()),
    }))
}

async fn unknown_api(Path(rest): Path<String>) -> ApiError {
    ApiError::NotFound(format!("no route /api/{rest}"))
}

async fn unknown() -> ApiError {
    ApiError::NotFound("no such route".into())
}
