//! HTTP/JSON gateway over [`medpipe_core::api::Service`].
//!
//! Instances keep no per-client state: every handler reads or writes the
//! shared stores, so several instances over one data directory are
//! interchangeable. Each response carries an `x-correlation-id` header (the
//! caller's, when it sent one).

use std::net::SocketAddr;
use std::path::Path;

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use medpipe_core::api::{
    render, AnonymizeRequest, ApiError, ErrorCode, ExecutionRequest, HomogeneityRequest,
    PlanRequest, Service, ServiceConfig, StudyQueryRequest,
};
use medpipe_core::catalog::ImageRecord;
use medpipe_core::provenance::EventFilter;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::oneshot;

pub const CORRELATION_HEADER: &str = "x-correlation-id";
pub const ENV_BIND_ADDRESS: &str = "PIPELINE_BIND_ADDRESS";
pub const ENV_TOKEN: &str = "PIPELINE_TOKEN";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot bind {address}: {source}")]
    Bind {
        address: String,
        source: std::io::Error,
    },
    #[error("shared stores unreachable: {0}")]
    StoreUnreachable(ApiError),
    #[error("bad gateway config: {0}")]
    Config(String),
    #[error("server error: {0}")]
    Serve(std::io::Error),
}

fn default_bind() -> String {
    "127.0.0.1:8080".into()
}

/// `ServiceConfig` fields plus `bind_address` and `token`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default = "default_bind")]
    pub bind_address: String,
    /// Bearer token required on every request; `None` disables the check.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(flatten)]
    pub service: ServiceConfig,
}

impl GatewayConfig {
    pub fn new(service: ServiceConfig) -> Self {
        GatewayConfig {
            bind_address: default_bind(),
            token: None,
            service,
        }
    }

    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: GatewayConfig = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        cfg.service
            .resolve_paths(path.parent().unwrap_or_else(|| Path::new(".")));
        Ok(cfg)
    }

    /// Applies `PIPELINE_BIND_ADDRESS` and `PIPELINE_TOKEN` when set.
    pub fn with_env_overrides(mut self) -> Self {
        if let Ok(addr) = std::env::var(ENV_BIND_ADDRESS) {
            self.bind_address = addr;
        }
        if let Ok(token) = std::env::var(ENV_TOKEN) {
            self.token = Some(token);
        }
        self
    }
}

#[derive(Clone)]
struct AppState {
    service: Service,
    token: Option<String>,
}

fn json_response<T: Serialize>(status: StatusCode, value: &T) -> Response {
    let mut resp = Response::new(Body::from(render(value)));
    *resp.status_mut() = status;
    resp.headers_mut().insert(
        header::CONTENT_TYPE,
        HeaderValue::from_static("application/json"),
    );
    resp
}

fn error_response(e: &ApiError) -> Response {
    let status = StatusCode::from_u16(e.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    json_response(status, e)
}

/// Runs a store-touching call off the async workers.
async fn blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Service) -> Result<T, ApiError> + Send + 'static,
{
    let svc = state.service.clone();
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .unwrap_or_else(|e| Err(ApiError::new(ErrorCode::Internal, e.to_string())))
}

async fn reply<T, F>(state: &AppState, status: StatusCode, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Service) -> Result<T, ApiError> + Send + 'static,
{
    match blocking(state, f).await {
        Ok(v) => json_response(status, &v),
        Err(e) => error_response(&e),
    }
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

fn body_text(body: Bytes) -> Result<String, ApiError> {
    String::from_utf8(body.to_vec()).map_err(|_| ApiError::bad_request("request body is not UTF-8"))
}

async fn health(State(s): State<AppState>) -> Response {
    json_response(StatusCode::OK, &s.service.health())
}

async fn register_pipeline(State(s): State<AppState>, body: Bytes) -> Response {
    let doc = match body_text(body) {
        Ok(d) => d,
        Err(e) => return error_response(&e),
    };
    match blocking(&s, move |svc| svc.register_pipeline(&doc)).await {
        Ok(r) if r.registered => json_response(StatusCode::CREATED, &r),
        Ok(r) => json_response(StatusCode::OK, &r),
        Err(e) => error_response(&e),
    }
}

async fn validate_pipeline(State(s): State<AppState>, body: Bytes) -> Response {
    let doc = match body_text(body) {
        Ok(d) => d,
        Err(e) => return error_response(&e),
    };
    reply(&s, StatusCode::OK, move |svc| svc.validate(&doc)).await
}

async fn get_pipeline(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    reply(&s, StatusCode::OK, move |svc| {
        svc.pipeline(&id)
            .map(|p| serde_json::to_value(p).expect("pipeline serializes"))
    })
    .await
}

async fn ingest(State(s): State<AppState>, body: Bytes) -> Response {
    let records: Vec<ImageRecord> = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    reply(&s, StatusCode::CREATED, move |svc| svc.ingest(&records)).await
}

async fn query_study(State(s): State<AppState>, body: Bytes) -> Response {
    let req: StudyQueryRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    reply(&s, StatusCode::CREATED, move |svc| svc.query_study(&req)).await
}

async fn get_study(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    reply(&s, StatusCode::OK, move |svc| svc.study_set(&id)).await
}

async fn homogeneity(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Response {
    let req: HomogeneityRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    reply(&s, StatusCode::OK, move |svc| svc.homogeneity(&id, &req)).await
}

async fn anonymize(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Response {
    let req: AnonymizeRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    reply(&s, StatusCode::CREATED, move |svc| svc.anonymize(&id, &req)).await
}

async fn create_plan(State(s): State<AppState>, body: Bytes) -> Response {
    let req: PlanRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    reply(&s, StatusCode::OK, move |svc| svc.plan(&req)).await
}

async fn start_execution(State(s): State<AppState>, body: Bytes) -> Response {
    let req: ExecutionRequest = match parse_body(&body) {
        Ok(r) => r,
        Err(e) => return error_response(&e),
    };
    reply(&s, StatusCode::ACCEPTED, move |svc| {
        svc.start_execution(&req)
    })
    .await
}

async fn get_execution(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    reply(&s, StatusCode::OK, move |svc| svc.execution(&id)).await
}

async fn cancel_execution(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    reply(&s, StatusCode::OK, move |svc| svc.cancel_execution(&id)).await
}

/// `?filter=task=b,kind=TASK_TRANSITION` or the same keys as separate
/// parameters (`?task=b&kind=TASK_TRANSITION&from=3`).
fn event_filter(params: &[(String, String)]) -> Result<EventFilter, ApiError> {
    let mut terms = Vec::new();
    for (k, v) in params {
        if k == "filter" {
            terms.push(v.clone());
        } else {
            terms.push(format!("{k}={v}"));
        }
    }
    EventFilter::parse_spec(&terms.join(",")).map_err(ApiError::bad_request)
}

async fn events(
    State(s): State<AppState>,
    Query(params): Query<Vec<(String, String)>>,
) -> Response {
    let filter = match event_filter(&params) {
        Ok(f) => f,
        Err(e) => return error_response(&e),
    };
    reply(&s, StatusCode::OK, move |svc| svc.events(&filter)).await
}

async fn lineage(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    reply(&s, StatusCode::OK, move |svc| svc.lineage(&id)).await
}

async fn artifact(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    match blocking(&s, move |svc| svc.artifact(&id)).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response(),
        Err(e) => error_response(&e),
    }
}

async fn not_found() -> Response {
    error_response(&ApiError::not_found("no such endpoint"))
}

fn correlation_id(headers: &HeaderMap) -> HeaderValue {
    headers
        .get(CORRELATION_HEADER)
        .filter(|v| !v.is_empty() && v.len() <= 128)
        .cloned()
        .unwrap_or_else(|| {
            HeaderValue::from_str(&uuid::Uuid::new_v4().to_string()).expect("uuid is ASCII")
        })
}

fn authorized(headers: &HeaderMap, token: &str) -> bool {
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|t| t == token)
}

async fn guard(State(s): State<AppState>, req: Request, next: Next) -> Response {
    let cid = correlation_id(req.headers());
    let mut resp = match &s.token {
        Some(token) if !authorized(req.headers(), token) => error_response(&ApiError::new(
            ErrorCode::Unauthorized,
            "missing or wrong bearer token",
        )),
        _ => {
            let (method, path) = (req.method().clone(), req.uri().path().to_string());
            let resp = next.run(req).await;
            tracing::debug!(%method, %path, status = resp.status().as_u16(), "request");
            resp
        }
    };
    resp.headers_mut().insert(CORRELATION_HEADER, cid);
    resp
}

pub fn router(service: Service, token: Option<String>) -> Router {
    let state = AppState { service, token };
    Router::new()
        .route("/health", get(health))
        .route("/pipelines", post(register_pipeline))
        .route("/pipelines/validate", post(validate_pipeline))
        .route("/pipelines/{id}", get(get_pipeline))
        .route("/catalog/images", post(ingest))
        .route("/studysets/query", post(query_study))
        .route("/studysets/{id}", get(get_study))
        .route("/studysets/{id}/homogeneity", post(homogeneity))
        .route("/studysets/{id}/anonymize", post(anonymize))
        .route("/plans", post(create_plan))
        .route("/executions", post(start_execution))
        .route("/executions/{id}", get(get_execution))
        .route("/executions/{id}/cancel", post(cancel_execution))
        .route("/provenance/events", get(events))
        .route("/provenance/lineage/{id}", get(lineage))
        .route("/artifacts/{id}", get(artifact))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(state.clone(), guard))
        .with_state(state)
}

/// A gateway serving on a background task.
pub struct RunningGateway {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<std::io::Result<()>>,
}

impl RunningGateway {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Stops accepting connections and waits for in-flight requests.
    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }

    /// Drops the server at once, as if the process died.
    pub fn kill(self) {
        self.task.abort();
    }
}

/// Binds `addr` and serves `service` until shut down.
pub async fn spawn(
    service: Service,
    token: Option<String>,
    addr: &str,
) -> Result<RunningGateway, GatewayError> {
    let listener = TcpListener::bind(addr)
        .await
        .map_err(|source| GatewayError::Bind {
            address: addr.to_string(),
            source,
        })?;
    let local = listener.local_addr().map_err(GatewayError::Serve)?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(service, token);
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    Ok(RunningGateway {
        addr: local,
        shutdown: Some(tx),
        task,
    })
}

/// Opens the shared stores and serves until Ctrl-C.
pub async fn serve(cfg: GatewayConfig) -> Result<(), GatewayError> {
    let service_cfg = cfg.service.clone();
    let service = tokio::task::spawn_blocking(move || Service::open(&service_cfg))
        .await
        .map_err(|e| GatewayError::Config(e.to_string()))?
        .map_err(GatewayError::StoreUnreachable)?;
    if cfg.token.is_none() {
        tracing::warn!("no bearer token configured; requests are not authenticated");
    }
    let running = spawn(service, cfg.token.clone(), &cfg.bind_address).await?;
    tracing::info!(address = %running.addr(), "gateway listening");
    eprintln!("listening on {}", running.url());
    let _ = tokio::signal::ctrl_c().await;
    running.shutdown().await;
    Ok(())
}
