use std::path::Path;
use std::process::{Command, Output};

use artgesture_core::data::synthetic::{generate, SyntheticConfig};
use artgesture_core::run_manifest::RunManifest;

const TINY: &[&str] = &[
    "--set",
    "model.backbone=tiny_test",
    "--set",
    "model.pretrained=false",
    "--set",
    "data.crop_size=16",
    "--set",
    "data.context_size=32",
    "--set",
    "train.batch_size=16",
    "--set",
    "train.epochs=2",
];

fn artgesture(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_artgesture"))
        .current_dir(cwd)
        .env_remove("GESTURE_SERVER")
        .args(args)
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn dataset(dir: &Path) {
    generate(&SyntheticConfig { per_class: 4, test_per_class: 2, ..Default::default() }, &dir.join("data")).unwrap();
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = artgesture(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("Usage"));

    let out = artgesture(dir.path(), &["config", "--set", "train.epoch=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("did you mean \"train.epochs\""), "{}", text(&out.stderr));

    let out = artgesture(dir.path(), &["config", "--set", "train.epochs=-1"]);
    assert_eq!(out.status.code(), Some(2));

    let out = artgesture(dir.path(), &["validate-data", "missing.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_config_keys() {
    let out = artgesture(Path::new("."), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let help = text(&out.stdout);
    for k in artgesture_core::config::KEYS {
        assert!(help.contains(k.key), "{} missing", k.key);
    }
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[train]\nepochs = 9\nseeds = [3]\n").unwrap();
    let out = artgesture(dir.path(), &["--set", "train.epochs=5", "config", "--config", "run.toml", "--set", "train.lr_head=0.01"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let s = text(&out.stdout);
    assert!(s.contains("train.epochs = 5"), "{s}");
    assert!(s.contains("train.seeds = [3]"), "{s}");
    assert!(s.contains("train.lr_head = 0.01"), "{s}");
}

#[test]
fn validate_data_reports_issues() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let out = artgesture(dir.path(), &["validate-data", "data/annotations.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("36 images, 36 instances, 6 classes"));

    let path = dir.path().join("data/annotations.json");
    let mut doc: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    doc["annotations"][0]["bbox"] = serde_json::json!([40, 40, 8, 8]);
    doc["annotations"][1]["bbox"] = serde_json::json!([3, 3, 0, 5]);
    std::fs::write(dir.path().join("broken.json"), serde_json::to_vec(&doc).unwrap()).unwrap();
    let out = artgesture(dir.path(), &["validate-data", "broken.json", "--set", "data.images_root=data"]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out.stderr));
    let err = text(&out.stderr);
    assert!(err.lines().any(|l| l.contains("[bbox_outside_image]")), "{err}");
    assert!(err.lines().any(|l| l.contains("[degenerate_bbox]")), "{err}");
}

#[test]
fn class_dist_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let out = artgesture(dir.path(), &["class-dist", "data/annotations.json", "--split", "test", "--out", "dist.csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("dist.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().skip(1).all(|l| l.contains(",2")), "{csv}");
}

#[test]
fn end_to_end_against_external_server() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let rt = tokio::runtime::Runtime::new().unwrap();
    let (addr, _) = rt.block_on(artgesture_service::spawn("127.0.0.1:0".parse().unwrap())).unwrap();
    let server = format!("http://{addr}");
    let with = |args: &[&str]| {
        let mut all = vec!["--server", server.as_str()];
        all.extend_from_slice(TINY);
        all.extend_from_slice(args);
        artgesture(dir.path(), &all)
    };

    let out = with(&["train", "data/annotations.json", "--out-dir", "runs/a", "--set", "train.seeds=0,1"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stderr).contains("seed 1 epoch   2"), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("over 2 runs"), "{}", text(&out.stdout));
    let ckpt = dir.path().join("runs/a/seed_0/best.ckpt");
    assert!(ckpt.exists());

    let out = with(&["evaluate", "--checkpoint", "runs/a/seed_0/best.ckpt", "data/annotations.json", "--out", "eval/m.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let first = std::fs::read(dir.path().join("eval/m.json")).unwrap();

    // Rerunning from the sidecar manifest reproduces the metrics file.
    std::fs::remove_file(dir.path().join("eval/m.json")).unwrap();
    let out = with(&["rerun", "eval/m.run_manifest.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert_eq!(std::fs::read(dir.path().join("eval/m.json")).unwrap(), first);

    let dets = serde_json::json!([
        {"image_id": "train_00001", "bbox": [0, 0, 16, 16], "score": 0.9},
        {"image_id": "train_00002", "bbox": [4, 4, 10, 10], "score": 0.3},
    ]);
    std::fs::write(dir.path().join("dets.json"), dets.to_string()).unwrap();
    let out = with(&["infer", "--checkpoint", "runs/a/seed_0/best.ckpt", "--images", "data", "--detections", "dets.json", "--out", "preds.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let preds: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("preds.json")).unwrap()).unwrap();
    assert_eq!(preds.as_array().map(Vec::len), Some(1));
    let m = RunManifest::load(&dir.path().join("preds.run_manifest.json")).unwrap();
    assert_eq!(m.command, "infer");

    let out = with(&["report", "--inputs", "runs/*/summary.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("±"), "{}", text(&out.stdout));

    let out = with(&["report", "--inputs", "nothing/*.json"]);
    assert_eq!(out.status.code(), Some(2));

    std::fs::write(dir.path().join("bad_dets.json"), r#"[{"image_id": "train_00001", "bbox": [0, 0, 4, 4], "score": 7}]"#).unwrap();
    let out = with(&["infer", "--checkpoint", "runs/a/seed_0/best.ckpt", "--images", "data", "--detections", "bad_dets.json", "--out", "p.json"]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out.stderr));
}
