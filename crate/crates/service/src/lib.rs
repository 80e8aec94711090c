//! HTTP/JSON front end under `/v1`. Long operations run on the blocking
//! pool; annotation edits are serialized through one workspace lock.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path as UrlPath, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use denerd_api::{ops, types::*, AnnotationWorkspace, ApiError, ApiResult, ErrorKind};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Environment variable holding the listening port.
pub const PORT_ENV: &str = "DENERD_PORT";
pub const DEFAULT_PORT: u16 = 8757;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{PORT_ENV} must be a port number, got {0:?}")]
    BadPort(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Api(#[from] ApiError),
}

/// Port from [`PORT_ENV`], or the default when unset.
pub fn port_from_env() -> Result<u16, ServiceError> {
    match std::env::var(PORT_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| ServiceError::BadPort(v)),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    workspace: Option<Arc<Mutex<AnnotationWorkspace>>>,
}

impl AppState {
    /// State without annotation routes; they answer 404.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_workspace(dir: &Path) -> ApiResult<Self> {
        Ok(AppState {
            workspace: Some(Arc::new(Mutex::new(AnnotationWorkspace::open(dir)?))),
        })
    }
}

pub fn status_of(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::Conflict => StatusCode::CONFLICT,
        ErrorKind::Invalid => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

struct HttpError(ApiError);

impl From<ApiError> for HttpError {
    fn from(e: ApiError) -> Self {
        HttpError(e)
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        if self.0.kind == ErrorKind::Internal {
            log::error!("{}", self.0.message);
        }
        (status_of(self.0.kind), Json(self.0)).into_response()
    }
}

/// JSON body whose rejections come back as API errors.
struct Body<T>(T);

impl<S, T> FromRequest<S> for Body<T>
where
    T: DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = HttpError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(e) => Err(HttpError(ApiError::invalid(rejection_message(&e)))),
        }
    }
}

fn rejection_message(e: &JsonRejection) -> String {
    format!("bad request body: {}", e.body_text())
}

type Reply<T> = Result<Json<T>, HttpError>;

async fn blocking<T, F>(f: F) -> Reply<T>
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> ApiResult<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(HttpError),
        Err(e) => Err(HttpError(ApiError::internal(format!("worker failed: {e}")))),
    }
}

fn workspace(state: &AppState) -> Result<Arc<Mutex<AnnotationWorkspace>>, HttpError> {
    state
        .workspace
        .clone()
        .ok_or_else(|| HttpError(ApiError::not_found("this server has no annotation workspace")))
}

async fn with_workspace<T, F>(state: &AppState, f: F) -> Reply<T>
where
    T: Serialize + Send + 'static,
    F: FnOnce(&mut AnnotationWorkspace) -> ApiResult<T> + Send + 'static,
{
    let ws = workspace(state)?;
    blocking(move || {
        let mut guard = ws.lock().map_err(|_| ApiError::internal("annotation workspace lock poisoned"))?;
        f(&mut guard)
    })
    .await
}

async fn health() -> Json<Health> {
    Json(ops::health())
}

async fn list_images(State(s): State<AppState>) -> Reply<Vec<ImageInfo>> {
    with_workspace(&s, |ws| ws.list()).await
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn image(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, HttpError> {
    let Json(bytes) = with_workspace(&s, move |ws| ws.image_bytes(&id)).await?;
    Ok(png(bytes))
}

async fn expression(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, HttpError> {
    let Json(bytes) = with_workspace(&s, move |ws| ws.expression_bytes(&id)).await?;
    Ok(png(bytes))
}

async fn get_annotations(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Reply<denerd_api::core::workbench::ImageAnnotations> {
    with_workspace(&s, move |ws| ws.get(&id)).await
}

async fn add_annotations(State(s): State<AppState>, UrlPath(id): UrlPath<String>, Body(req): Body<AddBoxesRequest>) -> Reply<denerd_api::core::workbench::ImageAnnotations> {
    with_workspace(&s, move |ws| ws.add(&id, &req)).await
}

async fn remove_annotations(State(s): State<AppState>, UrlPath(id): UrlPath<String>, Body(req): Body<RemoveBoxesRequest>) -> Reply<RemoveBoxesResponse> {
    with_workspace(&s, move |ws| ws.remove(&id, &req)).await
}

async fn export(State(s): State<AppState>, Body(req): Body<ExportRequest>) -> Reply<ExportResponse> {
    with_workspace(&s, move |ws| ws.export(&req)).await
}

async fn import(State(s): State<AppState>, Body(req): Body<ImportRequest>) -> Reply<ImportResponse> {
    with_workspace(&s, move |ws| ws.import(&req)).await
}

macro_rules! op {
    ($name:ident, $req:ty, $resp:ty) => {
        async fn $name(Body(req): Body<$req>) -> Reply<$resp> {
            blocking(move || ops::$name(&req)).await
        }
    };
}

op!(generate_corpus, GenerateCorpusRequest, GenerateCorpusResponse);
op!(generate_dataset, GenerateDatasetRequest, GenerateDatasetResponse);
op!(train, TrainRequest, TrainResponse);
op!(detect, DetectRequest, DetectResponse);
op!(register, RegisterRequest, RegisterResponse);
op!(quantify, QuantifyRequest, QuantifyResponse);
op!(stats, StatsRequest, StatsResponse);
op!(ranksum, RanksumRequest, denerd_api::core::stats::RankSumResult);
op!(run, RunRequest, RunResponse);
op!(run_all, RunAllRequest, RunAllResponse);
op!(report, ReportRequest, ReportResponse);

async fn fallback() -> HttpError {
    HttpError(ApiError::not_found("no such route"))
}

pub fn router(state: AppState) -> Router {
    let v1 = Router::new()
        .route("/health", get(health))
        .route("/images", get(list_images))
        .route("/images/{id}", get(image))
        .route("/images/{id}/expression", get(expression))
        .route("/images/{id}/annotations", get(get_annotations).post(add_annotations))
        .route("/images/{id}/annotations/remove", post(remove_annotations))
        .route("/export", post(export))
        .route("/import", post(import))
        .route("/corpus", post(generate_corpus))
        .route("/dataset", post(generate_dataset))
        .route("/train", post(train))
        .route("/detect", post(detect))
        .route("/register", post(register))
        .route("/quantify", post(quantify))
        .route("/stats", post(stats))
        .route("/ranksum", post(ranksum))
        .route("/run", post(run))
        .route("/run-all", post(run_all))
        .route("/report", post(report));
    Router::new().nest("/v1", v1).fallback(fallback).with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
