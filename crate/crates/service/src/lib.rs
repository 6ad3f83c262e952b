//! HTTP/JSON service over the gesture toolkit.

pub mod ops;

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use artgesture_core::api::{
    ApiError, ClassDistributionRequest, ClassDistributionResponse, ConfigRequest, DataRequest, ErrorBody, ErrorKind,
    EvaluateRequest, InferRequest, InferResponse, JobCreated, JobInfo, JobStatus, KeyInfo, ReportRequest, ReportResponse,
    ResolvedConfig, TrainRequest, ValidationResponse,
};
use artgesture_core::evaluation::MetricsReport;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::net::TcpListener;

/// Error response with a status derived from its kind.
#[derive(Debug)]
pub struct HttpError(pub ApiError);

impl<E: Into<ApiError>> From<E> for HttpError {
    fn from(e: E) -> Self {
        HttpError(e.into())
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        let status = match self.0.kind {
            ErrorKind::Usage => StatusCode::BAD_REQUEST,
            ErrorKind::InvalidData => StatusCode::UNPROCESSABLE_ENTITY,
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(message = %self.0.message, "request failed");
        } else {
            tracing::debug!(kind = ?self.0.kind, message = %self.0.message, "request rejected");
        }
        (status, Json(ErrorBody { error: self.0 })).into_response()
    }
}

type Reply<T> = Result<Json<T>, HttpError>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, HttpError> {
    payload.map(|Json(v)| v).map_err(|e| HttpError(ApiError::new(ErrorKind::Usage, e.body_text())))
}

/// Run CPU-bound work off the async workers.
async fn blocking<T, F>(f: F) -> Reply<T>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map(Json).map_err(HttpError),
        Err(e) => Err(HttpError(ApiError::new(ErrorKind::Internal, format!("worker failed: {e}")))),
    }
}

struct Job {
    info: Mutex<JobInfo>,
    cancel: Arc<AtomicBool>,
}

#[derive(Clone, Default)]
pub struct AppState {
    jobs: Arc<Mutex<HashMap<String, Arc<Job>>>>,
}

impl AppState {
    fn job(&self, id: &str) -> Result<Arc<Job>, HttpError> {
        self.jobs
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| HttpError(ApiError::new(ErrorKind::NotFound, format!("no job {id}"))))
    }
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok", "version": artgesture_core::VERSION}))
}

async fn config_keys() -> Json<Vec<KeyInfo>> {
    Json(ops::config_keys())
}

async fn resolve(payload: Result<Json<ConfigRequest>, JsonRejection>) -> Reply<ResolvedConfig> {
    Ok(Json(ops::resolve_full(&body(payload)?)?))
}

async fn validate(payload: Result<Json<DataRequest>, JsonRejection>) -> Reply<ValidationResponse> {
    let req = body(payload)?;
    blocking(move || ops::validate(&req)).await
}

async fn class_distribution(payload: Result<Json<ClassDistributionRequest>, JsonRejection>) -> Reply<ClassDistributionResponse> {
    let req = body(payload)?;
    blocking(move || ops::class_distribution(&req)).await
}

async fn start_train(
    State(state): State<AppState>,
    payload: Result<Json<TrainRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<JobCreated>), HttpError> {
    let req = body(payload)?;
    let (cfg, run_manifest) = ops::prepare_train(&req)?;
    let id = uuid::Uuid::new_v4().to_string();
    let job = Arc::new(Job {
        info: Mutex::new(JobInfo { id: id.clone(), status: JobStatus::Running, progress: vec![], result: None, error: None }),
        cancel: Arc::new(AtomicBool::new(false)),
    });
    state.jobs.lock().unwrap().insert(id.clone(), job.clone());
    tracing::info!(job = %id, out_dir = %req.out_dir.display(), "training started");

    tokio::task::spawn_blocking(move || {
        let sink = job.clone();
        let progress = Arc::new(move |p: artgesture_core::api::SeedProgress| {
            tracing::info!(seed = p.seed, epoch = p.record.epoch, loss = p.record.train_loss, val = p.record.val_macro_f1, "epoch");
            sink.info.lock().unwrap().progress.push(p);
        });
        let outcome = ops::train(&req, &cfg, job.cancel.clone(), progress);
        let mut info = job.info.lock().unwrap();
        match outcome {
            Ok(result) => {
                info.status = JobStatus::Succeeded;
                info.result = Some(result);
            }
            Err(e) => {
                info.status = if job.cancel.load(Ordering::Relaxed) { JobStatus::Cancelled } else { JobStatus::Failed };
                info.error = Some(e);
            }
        }
        tracing::info!(job = %info.id, status = ?info.status, "training finished");
    });
    Ok((StatusCode::ACCEPTED, Json(JobCreated { job_id: id, run_manifest })))
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> Reply<JobInfo> {
    Ok(Json(state.job(&id)?.info.lock().unwrap().clone()))
}

async fn cancel_job(State(state): State<AppState>, Path(id): Path<String>) -> Reply<JobInfo> {
    let job = state.job(&id)?;
    job.cancel.store(true, Ordering::Relaxed);
    let info = job.info.lock().unwrap().clone();
    Ok(Json(info))
}

async fn evaluate(payload: Result<Json<EvaluateRequest>, JsonRejection>) -> Reply<MetricsReport> {
    let req = body(payload)?;
    blocking(move || ops::evaluate(&req)).await
}

async fn infer(payload: Result<Json<InferRequest>, JsonRejection>) -> Reply<InferResponse> {
    let req = body(payload)?;
    blocking(move || ops::infer(&req)).await
}

async fn report(payload: Result<Json<ReportRequest>, JsonRejection>) -> Reply<ReportResponse> {
    Ok(Json(ops::report(&body(payload)?)?))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/config/keys", get(config_keys))
        .route("/v1/config/resolve", post(resolve))
        .route("/v1/data/validate", post(validate))
        .route("/v1/data/class-distribution", post(class_distribution))
        .route("/v1/train", post(start_train))
        .route("/v1/jobs/{id}", get(get_job).delete(cancel_job))
        .route("/v1/evaluate", post(evaluate))
        .route("/v1/infer", post(infer))
        .route("/v1/report", post(report))
        .with_state(state)
}

/// Serve until `shutdown` resolves.
pub async fn serve(listener: TcpListener, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, router(AppState::default())).with_graceful_shutdown(shutdown).await
}

/// Bind `addr` and serve in a background task; returns the bound address.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<(SocketAddr, tokio::task::JoinHandle<std::io::Result<()>>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let handle = tokio::spawn(async move { axum::serve(listener, router(AppState::default())).await });
    Ok((local, handle))
}
