use std::path::Path;
use std::time::Duration;

use artgesture_client::{Client, ClientError};
use artgesture_core::api::{
    ClassDistributionRequest, ConfigRequest, DataRequest, ErrorKind, EvaluateRequest, InferRequest, JobStatus,
    ReportRequest, TrainRequest,
};
use artgesture_core::config::KEYS;
use artgesture_core::data::synthetic::{generate, SyntheticConfig};
use artgesture_core::evaluation::ReportFormat;
use artgesture_core::run_manifest::RunManifest;

async fn start() -> Client {
    let (addr, _) = artgesture_service::spawn("127.0.0.1:0".parse().unwrap()).await.unwrap();
    Client::new(format!("http://{addr}"))
}

fn tiny(extra: &[&str]) -> ConfigRequest {
    let mut overrides: Vec<String> = [
        "model.backbone=tiny_test",
        "model.pretrained=false",
        "data.crop_size=16",
        "data.context_size=32",
        "train.batch_size=16",
        "train.epochs=3",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.extend(extra.iter().map(|s| s.to_string()));
    ConfigRequest { overrides, ..Default::default() }
}

fn dataset(dir: &Path) -> String {
    generate(&SyntheticConfig { per_class: 4, test_per_class: 2, ..Default::default() }, dir).unwrap();
    dir.join("annotations.json").display().to_string()
}

fn api_kind(e: ClientError) -> (u16, ErrorKind, String) {
    match e {
        ClientError::Api { status, error } => (status, error.kind, error.message),
        other => panic!("expected an API error, got {other}"),
    }
}

#[tokio::test]
async fn config_endpoints() {
    let c = start().await;
    assert_eq!(c.health().await.unwrap()["status"], "ok");
    let keys = c.config_keys().await.unwrap();
    assert_eq!(keys.len(), KEYS.len());
    assert!(keys.iter().all(|k| !k.doc.is_empty()));

    let resolved = c.resolve_config(&tiny(&["train.seeds=1,2"])).await.unwrap();
    assert_eq!(resolved.flat["train.seeds"], serde_json::json!([1, 2]));
    assert_eq!(resolved.config.train.seed_list(), vec![1, 2]);

    let err = c.resolve_config(&ConfigRequest { overrides: vec!["train.epoch=3".into()], ..Default::default() }).await;
    let (status, kind, msg) = api_kind(err.unwrap_err());
    assert_eq!((status, kind), (400, ErrorKind::Usage));
    assert!(msg.contains("train.epochs"), "{msg}");

    let err = c.resolve_config(&ConfigRequest { overrides: vec!["train.epochs=many".into()], ..Default::default() }).await;
    assert_eq!(api_kind(err.unwrap_err()).0, 400);

    let doc = ConfigRequest { document: Some("[train]\nepochs = 7\n".into()), ..Default::default() };
    assert_eq!(c.resolve_config(&doc).await.unwrap().config.train.config.epochs, 7);
}

#[tokio::test]
async fn data_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dataset(dir.path());
    let c = start().await;

    let v = c.validate_data(&DataRequest { annotations: vec![ann.clone()], config: tiny(&[]) }).await.unwrap();
    assert!(v.issues.is_empty());
    assert_eq!((v.n_images, v.n_instances), (36, 36));
    assert_eq!(v.splits["train"], 24);
    assert_eq!(v.labels.len(), 6);

    let d = c
        .class_distribution(&ClassDistributionRequest { annotations: vec![ann.clone()], split: "test".into(), ..Default::default() })
        .await
        .unwrap();
    assert_eq!(d.distribution.counts(), vec![2; 6]);
    assert_eq!(d.csv.lines().count(), 7);

    let err = c.validate_data(&DataRequest::default()).await.unwrap_err();
    assert_eq!(api_kind(err).1, ErrorKind::Usage);

    let bad = dir.path().join("broken.json");
    std::fs::write(&bad, "{\"images\": [").unwrap();
    let err = c.validate_data(&DataRequest { annotations: vec![bad.display().to_string()], ..Default::default() }).await;
    assert_eq!(api_kind(err.unwrap_err()).0, 422);
}

#[tokio::test]
async fn train_evaluate_infer_report() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let ann = dataset(data.path());
    let c = start().await;
    let config = tiny(&["train.seeds=0,1"]);

    let job = c
        .start_training(&TrainRequest { annotations: vec![ann.clone()], out_dir: out.path().into(), config: config.clone() })
        .await
        .unwrap();
    let manifest = RunManifest::load(&job.run_manifest).unwrap();
    assert_eq!(manifest.command, "train");
    assert_eq!(manifest.config.train.seed_list(), vec![0, 1]);

    let info = c.wait_job(&job.job_id, Duration::from_millis(50), |_| {}).await.unwrap();
    assert_eq!(info.status, JobStatus::Succeeded, "{:?}", info.error);
    assert_eq!(info.progress.len(), 6);
    let result = info.result.unwrap();
    assert_eq!(result.runs.len(), 2);
    let summary = result.summary.unwrap();
    assert_eq!(summary.n_runs, 2);
    assert!(out.path().join("summary.json").exists());
    assert!(out.path().join("seed_1").join("metrics_test.json").exists());

    let ckpt = result.runs[0].checkpoint.clone().unwrap();
    let metrics_out = out.path().join("eval").join("metrics.json");
    let report = c
        .evaluate(&EvaluateRequest {
            checkpoint: ckpt.clone(),
            annotations: vec![ann.clone()],
            config: config.clone(),
            out: Some(metrics_out.clone()),
        })
        .await
        .unwrap();
    assert_eq!(report.macro_f1, result.runs[0].test.as_ref().unwrap().macro_f1);
    assert!(metrics_out.exists());
    assert!(out.path().join("eval").join("metrics.run_manifest.json").exists());

    let preds = out.path().join("preds.csv");
    let inferred = c
        .infer(&InferRequest {
            checkpoint: ckpt.clone(),
            images: data.path().into(),
            detections: None,
            out: preds.clone(),
            config: config.clone(),
        })
        .await
        .unwrap();
    assert_eq!(inferred.predictions.len(), 36);
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 37);
    assert!(inferred.run_manifest.exists());

    let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(out.path().join("summary.json")).unwrap()).unwrap();
    let rep = c.report(&ReportRequest { documents: vec![doc], format: ReportFormat::Markdown }).await.unwrap();
    assert_eq!(rep.rows.len(), 1);
    assert!(rep.rendered.contains("±"), "{}", rep.rendered);

    let err = c
        .evaluate(&EvaluateRequest {
            checkpoint: out.path().join("missing.ckpt"),
            annotations: vec![ann],
            ..Default::default()
        })
        .await;
    assert_eq!(api_kind(err.unwrap_err()).1, ErrorKind::Usage);
}

#[tokio::test]
async fn jobs_can_be_cancelled() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let ann = dataset(data.path());
    let c = start().await;
    let job = c
        .start_training(&TrainRequest {
            annotations: vec![ann],
            out_dir: out.path().into(),
            config: tiny(&["train.epochs=500", "train.patience=0", "train.seeds=0"]),
        })
        .await
        .unwrap();
    c.cancel_job(&job.job_id).await.unwrap();
    let info = c.wait_job(&job.job_id, Duration::from_millis(50), |_| {}).await.unwrap();
    assert_eq!(info.status, JobStatus::Cancelled);
    assert!(info.progress.len() < 500);

    let err = c.job("no-such-job").await.unwrap_err();
    assert_eq!(api_kind(err).0, 404);
}

#[tokio::test]
async fn malformed_bodies_are_usage_errors() {
    let c = start().await;
    let resp = reqwest::Client::new()
        .post(format!("{}/v1/data/validate", c.base_url()))
        .header("content-type", "application/json")
        .body("{\"annotations\": 3}")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status().as_u16(), 400);
    let body: serde_json::Value = resp.json().await.unwrap();
    assert_eq!(body["error"]["kind"], "usage");
}
