//! HTTP/JSON inference service under `/api/v1`.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::engine::{Engine, EngineError, InterventionRequest, PredictRequest, SCHEMA_VERSION};

#[derive(Debug, Serialize)]
struct ErrorBody {
    schema_version: u32,
    error: ErrorDetail,
}

#[derive(Debug, Serialize)]
struct ErrorDetail {
    code: &'static str,
    message: String,
}

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code: "bad_request",
            message: message.into(),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let (status, code) = match &e {
            EngineError::UnknownSample(_) => (StatusCode::NOT_FOUND, "unknown_sample"),
            EngineError::BadClamp(_) => (StatusCode::BAD_REQUEST, "bad_clamp"),
            EngineError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            EngineError::Core(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self {
            status,
            code,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            schema_version: SCHEMA_VERSION,
            error: ErrorDetail {
                code: self.code,
                message: self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

type Shared = Arc<Engine>;

/// Allowed browser origins; `None` permits any origin.
pub fn cors(origins: Option<&[String]>) -> anyhow::Result<CorsLayer> {
    let layer = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    Ok(match origins {
        None => layer.allow_origin(Any),
        Some(list) => {
            let values = list
                .iter()
                .map(|o| HeaderValue::from_str(o).map_err(|e| anyhow::anyhow!("bad origin `{o}`: {e}")))
                .collect::<anyhow::Result<Vec<_>>>()?;
            layer.allow_origin(AllowOrigin::list(values))
        }
    })
}

pub fn router(engine: Shared, cors: CorsLayer) -> Router {
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/concepts", get(concepts))
        .route("/api/v1/samples", get(samples))
        .route("/api/v1/predict", post(predict))
        .route("/api/v1/intervene", post(intervene))
        .layer(cors)
        .with_state(engine)
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

/// Runs model inference off the async executor.
async fn blocking<T, F>(engine: Shared, f: F) -> Result<Json<T>, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, EngineError> + Send + 'static,
{
    let out = tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            code: "internal",
            message: e.to_string(),
        })??;
    Ok(Json(out))
}

async fn health(State(engine): State<Shared>) -> impl IntoResponse {
    Json(engine.health())
}

async fn concepts(State(engine): State<Shared>) -> impl IntoResponse {
    Json(engine.concepts())
}

async fn samples(State(engine): State<Shared>) -> impl IntoResponse {
    Json(engine.samples())
}

async fn predict(State(engine): State<Shared>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: PredictRequest = parse(&body)?;
    blocking(engine, move |e| e.predict(&req.sample_id)).await
}

async fn intervene(State(engine): State<Shared>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let req: InterventionRequest = parse(&body)?;
    blocking(engine, move |e| e.intervene(&req)).await
}

pub async fn serve(engine: Engine, addr: SocketAddr, cors: CorsLayer) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| anyhow::anyhow!("cannot bind {addr}: {e}"))?;
    tracing::info!(addr = %listener.local_addr()?, "serving /api/v1");
    axum::serve(listener, router(Arc::new(engine), cors)).await?;
    Ok(())
}
