//! Typed HTTP client for `gesture-server`.

use std::time::Duration;

use artgesture_core::api::{
    ApiError, ClassDistributionRequest, ClassDistributionResponse, ConfigRequest, DataRequest, ErrorBody, ErrorKind,
    EvaluateRequest, InferRequest, InferResponse, JobCreated, JobInfo, KeyInfo, ReportRequest, ReportResponse,
    ResolvedConfig, TrainRequest, ValidationResponse,
};
use artgesture_core::evaluation::MetricsReport;
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("{error} (HTTP {status})")]
    Api { status: u16, error: ApiError },
    #[error("cannot reach server: {0}")]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ClientError::Api { error, .. } => error.kind,
            ClientError::Transport(_) => ErrorKind::Internal,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base_url: impl Into<String>) -> Self {
        let base = base_url.into().trim_end_matches('/').to_string();
        Self { base, http: reqwest::Client::new() }
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    async fn call<B: Serialize, T: DeserializeOwned>(&self, method: Method, path: &str, body: Option<&B>) -> Result<T> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await?;
        let status = resp.status();
        if status.is_success() {
            return Ok(resp.json().await?);
        }
        let text = resp.text().await?;
        let error = serde_json::from_str::<ErrorBody>(&text).map(|b| b.error).unwrap_or_else(|_| {
            let kind = match status {
                StatusCode::NOT_FOUND => ErrorKind::NotFound,
                s if s.is_client_error() => ErrorKind::Usage,
                _ => ErrorKind::Internal,
            };
            ApiError::new(kind, if text.is_empty() { status.to_string() } else { text })
        });
        Err(ClientError::Api { status: status.as_u16(), error })
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.call::<(), T>(Method::GET, path, None).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        self.call(Method::POST, path, Some(body)).await
    }

    pub async fn health(&self) -> Result<Value> {
        self.get("/health").await
    }

    pub async fn config_keys(&self) -> Result<Vec<KeyInfo>> {
        self.get("/v1/config/keys").await
    }

    pub async fn resolve_config(&self, req: &ConfigRequest) -> Result<ResolvedConfig> {
        self.post("/v1/config/resolve", req).await
    }

    pub async fn validate_data(&self, req: &DataRequest) -> Result<ValidationResponse> {
        self.post("/v1/data/validate", req).await
    }

    pub async fn class_distribution(&self, req: &ClassDistributionRequest) -> Result<ClassDistributionResponse> {
        self.post("/v1/data/class-distribution", req).await
    }

    pub async fn start_training(&self, req: &TrainRequest) -> Result<JobCreated> {
        self.post("/v1/train", req).await
    }

    pub async fn job(&self, id: &str) -> Result<JobInfo> {
        self.get(&format!("/v1/jobs/{id}")).await
    }

    pub async fn cancel_job(&self, id: &str) -> Result<JobInfo> {
        self.call::<(), _>(Method::DELETE, &format!("/v1/jobs/{id}"), None).await
    }

    /// Poll until the job finishes, passing each snapshot to `on_update`.
    pub async fn wait_job(&self, id: &str, interval: Duration, mut on_update: impl FnMut(&JobInfo)) -> Result<JobInfo> {
        loop {
            let info = self.job(id).await?;
            on_update(&info);
            if info.status.is_finished() {
                return Ok(info);
            }
            tokio::time::sleep(interval).await;
        }
    }

    pub async fn evaluate(&self, req: &EvaluateRequest) -> Result<MetricsReport> {
        self.post("/v1/evaluate", req).await
    }

    pub async fn infer(&self, req: &InferRequest) -> Result<InferResponse> {
        self.post("/v1/infer", req).await
    }

    pub async fn report(&self, req: &ReportRequest) -> Result<ReportResponse> {
        self.post("/v1/report", req).await
    }
}
