//! Blocking implementations behind each endpoint.

use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use artgesture_core::api::{
    ApiError, ClassDistributionRequest, ClassDistributionResponse, ConfigRequest, DataRequest, ErrorKind, EvaluateRequest,
    InferRequest, InferResponse, KeyInfo, ReportRequest, ReportResponse, ResolvedConfig, SeedProgress, SeedResult,
    TrainRequest, TrainResult, ValidationResponse,
};
use artgesture_core::config::{self, parse_document, parse_override, resolve_document, DocumentFormat, ToolkitConfig};
use artgesture_core::data::{
    parse_sources, validate_manifest, AnnotationSource, DatasetManifest, ExampleLoader, LabelMap, ParseOptions,
};
use artgesture_core::evaluation::{
    collect_rows, evaluate_split, render_report, EvalOptions, MetricsReport, MultiRunSummary,
};
use artgesture_core::inference::{
    export_predictions, load_detections, run_pipeline, AdapterRegistry, DetectionOptions, ExportFormat, ImageIndex,
};
use artgesture_core::model::load_checkpoint;
use artgesture_core::run_manifest::{RunManifest, RUN_MANIFEST_FILE};
use artgesture_core::training::{run_multi_seed, TrainOptions, BEST_CHECKPOINT, LOG_FILE};

pub const SUMMARY_FILE: &str = "summary.json";

fn usage(msg: impl Into<String>) -> ApiError {
    ApiError::new(ErrorKind::Usage, msg)
}

fn io_error(path: &Path, e: std::io::Error) -> ApiError {
    ApiError::new(ErrorKind::Internal, format!("{}: {e}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), ApiError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    std::fs::write(path, serde_json::to_vec_pretty(value).expect("serializable")).map_err(|e| io_error(path, e))
}

pub fn config_keys() -> Vec<KeyInfo> {
    let defaults = ToolkitConfig::default().to_flat();
    config::KEYS
        .iter()
        .map(|k| KeyInfo {
            key: k.key.to_string(),
            kind: k.kind.describe(),
            optional: k.optional,
            default: defaults[k.key].clone(),
            doc: k.doc.to_string(),
        })
        .collect()
}

pub fn resolve(req: &ConfigRequest) -> Result<ToolkitConfig, ApiError> {
    let doc = match &req.document {
        Some(text) => Some(parse_document(text, req.format.unwrap_or(DocumentFormat::Toml), "config document")?),
        None => None,
    };
    let overrides = req.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(resolve_document(doc.as_ref(), &overrides)?)
}

pub fn resolve_full(req: &ConfigRequest) -> Result<ResolvedConfig, ApiError> {
    let config = resolve(req)?;
    Ok(ResolvedConfig { flat: config.to_flat(), config })
}

fn load_manifest(annotations: &[String], cfg: &ToolkitConfig, labels: Option<LabelMap>) -> Result<DatasetManifest, ApiError> {
    if annotations.is_empty() {
        return Err(usage("no annotation files given"));
    }
    let sources: Vec<AnnotationSource> = annotations.iter().map(|a| AnnotationSource::parse_arg(a)).collect();
    let opts = ParseOptions {
        images_root: cfg.data.images_root.clone(),
        label_map: labels,
        default_split: cfg.data.default_split.clone(),
        background: cfg.data.background,
    };
    Ok(parse_sources(&sources, &opts)?)
}

pub fn validate(req: &DataRequest) -> Result<ValidationResponse, ApiError> {
    let cfg = resolve(&req.config)?;
    let manifest = load_manifest(&req.annotations, &cfg, None)?;
    Ok(ValidationResponse {
        issues: validate_manifest(&manifest),
        n_images: manifest.images.len(),
        n_instances: manifest.instances.len(),
        splits: manifest.splits.iter().map(|(k, v)| (k.clone(), v.len())).collect(),
        labels: manifest.labels.names().to_vec(),
    })
}

pub fn class_distribution(req: &ClassDistributionRequest) -> Result<ClassDistributionResponse, ApiError> {
    let cfg = resolve(&req.config)?;
    let manifest = load_manifest(&req.annotations, &cfg, None)?;
    let split = if req.split.is_empty() { cfg.train.config.train_split.as_str() } else { req.split.as_str() };
    let mut distribution = manifest.class_distribution(split)?;
    if !req.include_background {
        distribution = distribution.without_background();
    }
    Ok(ClassDistributionResponse { csv: distribution.to_csv(), distribution })
}

/// Resolve and write the run manifest of a training request.
pub fn prepare_train(req: &TrainRequest) -> Result<(ToolkitConfig, PathBuf), ApiError> {
    if req.out_dir.as_os_str().is_empty() {
        return Err(usage("out_dir is required"));
    }
    let cfg = resolve(&req.config)?;
    let manifest = RunManifest::new("train", cfg.clone())
        .input("annotations", &req.annotations)
        .input("out_dir", &req.out_dir)
        .output("summary", req.out_dir.join(SUMMARY_FILE))
        .output("runs", req.out_dir.join("seed_<seed>"))
        .output("checkpoint", req.out_dir.join("seed_<seed>").join(BEST_CHECKPOINT))
        .output("log", req.out_dir.join("seed_<seed>").join(LOG_FILE));
    let path = req.out_dir.join(RUN_MANIFEST_FILE);
    manifest.write(&path).map_err(|e| io_error(&path, e))?;
    Ok((cfg, path))
}

pub fn train(
    req: &TrainRequest,
    cfg: &ToolkitConfig,
    cancel: Arc<AtomicBool>,
    progress: Arc<dyn Fn(SeedProgress) + Send + Sync>,
) -> Result<TrainResult, ApiError> {
    let manifest = load_manifest(&req.annotations, cfg, None)?;
    let issues = validate_manifest(&manifest);
    if !issues.is_empty() {
        let shown: Vec<String> = issues.iter().take(5).map(ToString::to_string).collect();
        return Err(ApiError::new(
            ErrorKind::InvalidData,
            format!("{} dataset issue(s); run validate-data. First: {}", issues.len(), shown.join("; ")),
        ));
    }
    let labels = manifest.labels.clone();
    let pre = cfg.data.preprocess.clone();
    let model_cfg = cfg.model.model_config(manifest.num_classes(), &pre);
    let test_split = cfg.train.test_split.as_str();
    let has_test = manifest.split_instances(test_split).is_ok_and(|v| !v.is_empty());
    let loader = ExampleLoader::new(Arc::new(manifest), pre)?;

    let mut runs = Vec::new();
    let mut reports = Vec::new();
    for seed in cfg.train.seed_list() {
        let report = progress.clone();
        let opts = TrainOptions {
            out_dir: Some(req.out_dir.clone()),
            cancel: Some(cancel.clone()),
            progress: Some(Arc::new(move |record| report(SeedProgress { seed, record: record.clone() }))),
        };
        let run = run_multi_seed(&model_cfg, &labels, &loader, &cfg.train.config, &[seed], has_test.then_some(test_split), &opts)?
            .pop()
            .expect("one run per seed");
        let dir = req.out_dir.join(format!("seed_{seed}"));
        if let Some(test) = &run.test {
            write_json(&dir.join(format!("metrics_{test_split}.json")), test)?;
            reports.push(test.clone());
        }
        runs.push(SeedResult {
            seed,
            epochs_run: run.state.epochs_run(),
            best_epoch: run.state.best_epoch,
            best_val_macro_f1: run.state.best_val_macro_f1,
            stopped_early: run.state.stopped_early,
            selection_split: run.state.selection_split.clone(),
            checkpoint: run.state.best_checkpoint.clone(),
            test: run.test,
        });
    }
    let summary = match reports.first() {
        Some(first) if reports.len() == runs.len() => {
            let summary = MultiRunSummary::from_reports(&first.backbone, first.variant, &reports)?;
            write_json(&req.out_dir.join(SUMMARY_FILE), &summary)?;
            Some(summary)
        }
        _ => None,
    };
    Ok(TrainResult { out_dir: req.out_dir.clone(), runs, summary })
}

/// `<out>` → `<out stem>.run_manifest.json` beside it.
fn sidecar_manifest(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.{RUN_MANIFEST_FILE}"))
}

pub fn evaluate(req: &EvaluateRequest) -> Result<MetricsReport, ApiError> {
    let cfg = resolve(&req.config)?;
    if let Some(out) = &req.out {
        let manifest = RunManifest::new("evaluate", cfg.clone())
            .input("checkpoint", &req.checkpoint)
            .input("annotations", &req.annotations)
            .input("out", out)
            .output("metrics", out);
        let path = sidecar_manifest(out);
        manifest.write(&path).map_err(|e| io_error(&path, e))?;
    }
    let (model, header) = load_checkpoint(&req.checkpoint)?;
    let manifest = load_manifest(&req.annotations, &cfg, Some(model.labels().clone()))?;
    let loader = ExampleLoader::new(Arc::new(manifest), model.preprocess.clone())?;
    let variant = cfg.eval.variant.unwrap_or_else(|| model.default_variant());
    let run_id = req
        .checkpoint
        .parent()
        .and_then(|p| p.file_name())
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let opts = EvalOptions { batch_size: cfg.eval.batch_size, run_id, seed: header.metadata.get("seed").and_then(|s| s.as_u64()) };
    let report = evaluate_split(&model, &loader, &cfg.eval.split, variant, &opts)?;
    if let Some(out) = &req.out {
        write_json(out, &report)?;
    }
    Ok(report)
}

pub fn infer(req: &InferRequest) -> Result<InferResponse, ApiError> {
    if req.out.as_os_str().is_empty() {
        return Err(usage("out is required"));
    }
    let cfg = resolve(&req.config)?;
    let run_manifest = sidecar_manifest(&req.out);
    RunManifest::new("infer", cfg.clone())
        .input("checkpoint", &req.checkpoint)
        .input("images", &req.images)
        .input("detections", &req.detections)
        .input("out", &req.out)
        .output("predictions", &req.out)
        .write(&run_manifest)
        .map_err(|e| io_error(&run_manifest, e))?;

    let (model, _) = load_checkpoint(&req.checkpoint)?;
    let detections = match &req.detections {
        Some(path) => Some(load_detections(
            path,
            &DetectionOptions { score_threshold: cfg.infer.score_threshold, category_id: cfg.infer.category_id },
        )?),
        None => None,
    };
    let adapter_name = cfg.infer.adapter.clone().unwrap_or_else(|| if detections.is_some() { "replay" } else { "null" }.into());
    let registry = AdapterRegistry::builtin(detections);
    let adapter = registry.get(&adapter_name)?;
    let index = ImageIndex::from_dir(&req.images)?;
    let out = run_pipeline(&model, &index, adapter, &cfg.infer.infer_config())?;
    let format = cfg.infer.format.unwrap_or_else(|| ExportFormat::for_path(&req.out));
    export_predictions(&out.predictions, model.labels().names(), &req.out, format)?;
    Ok(InferResponse { out: req.out.clone(), run_manifest, predictions: out.predictions, skipped: out.skipped })
}

pub fn report(req: &ReportRequest) -> Result<ReportResponse, ApiError> {
    let rows = collect_rows(&req.documents)?;
    let rendered = render_report(&rows, req.format)?;
    Ok(ReportResponse { rows, rendered })
}
