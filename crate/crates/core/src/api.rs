//! Request and response bodies of the HTTP service.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{DocumentFormat, ToolkitConfig};
use crate::data::{ClassDistribution, Issue};
use crate::evaluation::{MetricsReport, MultiRunSummary, ReportFormat};
use crate::inference::{GesturePrediction, SkippedDetection};
use crate::training::EpochRecord;

/// Config document (file contents) plus `key=value` overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigRequest {
    pub document: Option<String>,
    /// Defaults to TOML.
    pub format: Option<DocumentFormat>,
    pub overrides: Vec<String>,
}

impl ConfigRequest {
    /// Replays a resolved config exactly.
    pub fn snapshot(config: &ToolkitConfig) -> Self {
        Self {
            document: Some(serde_json::to_string(config).expect("config serializes")),
            format: Some(DocumentFormat::Json),
            overrides: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyInfo {
    pub key: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub optional: bool,
    pub default: Value,
    pub doc: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub config: ToolkitConfig,
    pub flat: BTreeMap<String, Value>,
}

/// Annotation files, each `path` or `split=path`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataRequest {
    pub annotations: Vec<String>,
    pub config: ConfigRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationResponse {
    pub issues: Vec<Issue>,
    pub n_images: usize,
    pub n_instances: usize,
    /// Instances per split.
    pub splits: BTreeMap<String, usize>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassDistributionRequest {
    pub annotations: Vec<String>,
    pub config: ConfigRequest,
    pub split: String,
    pub include_background: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistributionResponse {
    pub distribution: ClassDistribution,
    pub csv: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRequest {
    pub annotations: Vec<String>,
    pub out_dir: PathBuf,
    pub config: ConfigRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: String,
    pub run_manifest: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        self != JobStatus::Running
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedProgress {
    pub seed: u64,
    pub record: EpochRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub stopped_early: bool,
    pub selection_split: String,
    pub checkpoint: Option<PathBuf>,
    pub test: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub out_dir: PathBuf,
    pub runs: Vec<SeedResult>,
    /// Mean ± std of test macro-F1 when every run was tested.
    pub summary: Option<MultiRunSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobInfo {
    pub id: String,
    pub status: JobStatus,
    pub progress: Vec<SeedProgress>,
    pub result: Option<TrainResult>,
    pub error: Option<ApiError>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateRequest {
    pub checkpoint: PathBuf,
    pub annotations: Vec<String>,
    pub config: ConfigRequest,
    /// Metrics JSON destination; a run manifest is written beside it.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferRequest {
    pub checkpoint: PathBuf,
    pub images: PathBuf,
    pub detections: Option<PathBuf>,
    pub out: PathBuf,
    pub config: ConfigRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResponse {
    pub out: PathBuf,
    pub run_manifest: PathBuf,
    pub predictions: Vec<GesturePrediction>,
    pub skipped: Vec<SkippedDetection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRequest {
    /// Parsed JSON of summary or metrics files.
    pub documents: Vec<Value>,
    pub format: ReportFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportResponse {
    pub rows: Vec<MultiRunSummary>,
    pub rendered: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// Bad request: unknown keys, wrong types, missing inputs.
    Usage,
    /// Inputs that parse but violate their contracts.
    InvalidData,
    NotFound,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{message}")]
pub struct ApiError {
    pub kind: ErrorKind,
    pub message: String,
}

impl ApiError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }
}

/// Error body of every failed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ApiError,
}

impl From<crate::config::ConfigError> for ApiError {
    fn from(e: crate::config::ConfigError) -> Self {
        ApiError::new(ErrorKind::Usage, e.to_string())
    }
}

impl From<crate::data::DataError> for ApiError {
    fn from(e: crate::data::DataError) -> Self {
        use crate::data::DataError as D;
        let kind = match &e {
            D::Io { .. } | D::UnknownSplit { .. } | D::InvalidConfig { .. } => ErrorKind::Usage,
            _ => ErrorKind::InvalidData,
        };
        ApiError::new(kind, e.to_string())
    }
}

impl From<crate::model::ModelError> for ApiError {
    fn from(e: crate::model::ModelError) -> Self {
        use crate::model::ModelError as M;
        let kind = match &e {
            M::UnknownBackbone { .. } | M::InvalidConfig(_) | M::Io { .. } | M::PretrainedWeightsUnavailable { .. } => {
                ErrorKind::Usage
            }
            M::VersionMismatch { .. } | M::CorruptCheckpoint(_) => ErrorKind::InvalidData,
            M::ShapeMismatch(_) => ErrorKind::Internal,
        };
        ApiError::new(kind, e.to_string())
    }
}

impl From<crate::evaluation::EvalError> for ApiError {
    fn from(e: crate::evaluation::EvalError) -> Self {
        use crate::evaluation::EvalError as E;
        match e {
            E::Data(d) => d.into(),
            E::Model(m) => m.into(),
            E::EmptyInput(_) | E::InvalidReport(_) | E::InvalidMatrix(_) => ApiError::new(ErrorKind::InvalidData, e.to_string()),
            other => ApiError::new(ErrorKind::Internal, other.to_string()),
        }
    }
}

impl From<crate::training::TrainError> for ApiError {
    fn from(e: crate::training::TrainError) -> Self {
        use crate::training::TrainError as T;
        match e {
            T::Data(d) => d.into(),
            T::Model(m) => m.into(),
            T::Eval(ev) => ev.into(),
            T::InvalidConfig(_) => ApiError::new(ErrorKind::Usage, e.to_string()),
            T::AllZeroCounts | T::LabelOutOfRange { .. } => ApiError::new(ErrorKind::InvalidData, e.to_string()),
            other => ApiError::new(ErrorKind::Internal, other.to_string()),
        }
    }
}

impl From<crate::inference::InferenceError> for ApiError {
    fn from(e: crate::inference::InferenceError) -> Self {
        use crate::inference::InferenceError as I;
        match e {
            I::Data(d) => d.into(),
            I::Model(m) => m.into(),
            I::AdapterUnavailable { .. } | I::Io { .. } | I::UnknownImage(_) => ApiError::new(ErrorKind::Usage, e.to_string()),
            I::MalformedDetections { .. } | I::InvalidDetection { .. } => ApiError::new(ErrorKind::InvalidData, e.to_string()),
            other => ApiError::new(ErrorKind::Internal, other.to_string()),
        }
    }
}
