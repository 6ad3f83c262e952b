//! Detection-then-classify prediction on unannotated images.

mod adapter;
mod detections;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::{Axis, Ix2};
use serde::{Deserialize, Serialize};

pub use adapter::{detect_checked, AdapterRegistry, DetectorAdapter, NullAdapter, ReplayAdapter};
pub use detections::{load_detections, parse_detections, Detection, DetectionOptions, DetectionSet};

use crate::autograd::Tensor;
use crate::data::{
    extract_crop, finish_tensor, load_rgb, resize_square, Augmentation, BBox, DataError, DatasetManifest,
};
use crate::evaluation::argmax_rows;
use crate::model::{ModelError, TwoStreamModel, Variant};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("{}: malformed detections: {message}", path.display())]
    MalformedDetections { path: PathBuf, message: String },
    #[error("detector adapter {name:?} unavailable (registered: {})", available.join(", "))]
    AdapterUnavailable { name: String, available: Vec<String> },
    #[error("adapter {adapter:?} returned an invalid detection for image {image_id}: {message}")]
    InvalidDetection { adapter: String, image_id: String, message: String },
    #[error("no image file for id {0:?}")]
    UnknownImage(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferConfig {
    pub score_threshold: f64,
    pub batch_size: usize,
    /// Defaults to the model's own variant.
    pub variant: Option<Variant>,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { score_threshold: 0.5, batch_size: 32, variant: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GesturePrediction {
    pub image_id: String,
    pub bbox: BBox,
    pub label_name: String,
    pub label_id: usize,
    pub probability: f64,
    pub full_distribution: Vec<f64>,
}

/// A detection that produced no crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDetection {
    pub image_id: String,
    pub bbox: BBox,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutput {
    pub predictions: Vec<GesturePrediction>,
    pub skipped: Vec<SkippedDetection>,
}

impl PredictionOutput {
    fn extend(&mut self, other: PredictionOutput) {
        self.predictions.extend(other.predictions);
        self.skipped.extend(other.skipped);
    }
}

fn softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Classify every detection on one decoded image. The full image is the
/// context of each detection; crops that come out empty are skipped.
pub fn predict(
    model: &TwoStreamModel,
    image_id: &str,
    image: &RgbImage,
    detections: &[Detection],
    cfg: &InferConfig,
) -> Result<PredictionOutput, InferenceError> {
    let pre = &model.preprocess;
    let variant = cfg.variant.unwrap_or_else(|| model.default_variant());
    let mut out = PredictionOutput::default();
    let mut kept: Vec<(&Detection, Tensor)> = Vec::with_capacity(detections.len());
    for det in detections {
        match extract_crop(image, &det.bbox, pre.pad_ratio) {
            Ok(crop) => kept.push((det, finish_tensor(&resize_square(&crop, pre.crop_size), pre, &Augmentation::IDENTITY))),
            Err(DataError::EmptyCrop { .. }) => {
                tracing::warn!(image_id, bbox = ?det.bbox.to_array(), "skipping detection with empty crop");
                out.skipped.push(SkippedDetection {
                    image_id: image_id.to_string(),
                    bbox: det.bbox,
                    reason: "empty crop".into(),
                });
            }
            Err(e) => return Err(e.into()),
        }
    }
    if kept.is_empty() {
        return Ok(out);
    }
    let context = finish_tensor(&resize_square(image, pre.context_size), pre, &Augmentation::IDENTITY);
    let names = model.labels().names();
    for chunk in kept.chunks(cfg.batch_size.max(1)) {
        let crops: Vec<_> = chunk.iter().map(|(_, t)| t.view().insert_axis(Axis(0))).collect();
        let crop = ndarray::concatenate(Axis(0), &crops).expect("uniform crop shapes");
        let ctx = match variant {
            Variant::WithContext => {
                let views = vec![context.view().insert_axis(Axis(0)); chunk.len()];
                Some(ndarray::concatenate(Axis(0), &views).expect("uniform context shapes"))
            }
            Variant::WithoutContext => None,
        };
        let logits = model.predict_logits(&crop, ctx.as_ref(), variant)?.into_dimensionality::<Ix2>().expect("2-D logits");
        let ids = argmax_rows(&logits);
        for (((det, _), row), id) in chunk.iter().zip(logits.rows()).zip(ids) {
            let dist = softmax(row.as_slice().expect("contiguous logits"));
            out.predictions.push(GesturePrediction {
                image_id: image_id.to_string(),
                bbox: det.bbox,
                label_name: names[id].clone(),
                label_id: id,
                probability: dist[id],
                full_distribution: dist,
            });
        }
    }
    Ok(out)
}

/// Image id → file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageIndex {
    files: BTreeMap<String, PathBuf>,
}

impl ImageIndex {
    /// Every png/jpeg in `dir` (non-recursive), keyed by file stem.
    pub fn from_dir(dir: &Path) -> Result<Self, InferenceError> {
        let io = |source| InferenceError::Io { path: dir.to_path_buf(), source };
        let mut files = BTreeMap::new();
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if !matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                continue;
            }
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                files.insert(stem.to_string(), path);
            }
        }
        Ok(Self { files })
    }

    pub fn from_manifest(manifest: &DatasetManifest) -> Self {
        Self { files: manifest.images.iter().map(|r| (r.image_id.clone(), r.file_path.clone())).collect() }
    }

    pub fn ids(&self) -> Vec<String> {
        self.files.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    /// Lookup by id, falling back to a full file name.
    pub fn path(&self, id: &str) -> Option<&Path> {
        self.files
            .get(id)
            .or_else(|| self.files.values().find(|p| p.file_name().is_some_and(|n| n == id)))
            .map(PathBuf::as_path)
    }
}

/// Detect and classify over a set of images: the adapter's own image list
/// when it has one, otherwise every indexed image. Detections below the
/// score threshold are dropped before classification.
pub fn run_pipeline(
    model: &TwoStreamModel,
    index: &ImageIndex,
    adapter: &dyn DetectorAdapter,
    cfg: &InferConfig,
) -> Result<PredictionOutput, InferenceError> {
    let ids = adapter.image_ids().unwrap_or_else(|| index.ids());
    let mut out = PredictionOutput::default();
    for id in ids {
        let path = index.path(&id).ok_or_else(|| InferenceError::UnknownImage(id.clone()))?;
        let image = load_rgb(path)?;
        let dets: Vec<Detection> =
            detect_checked(adapter, &id, &image)?.into_iter().filter(|d| d.score >= cfg.score_threshold).collect();
        out.extend(predict(model, &id, &image, &dets, cfg)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Json,
    Csv,
}

impl ExportFormat {
    /// From a file extension; anything but `.csv` is JSON.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => ExportFormat::Csv,
            _ => ExportFormat::Json,
        }
    }
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ExportFormat::Json),
            "csv" => Ok(ExportFormat::Csv),
            _ => Err(format!("unknown export format {s:?} (expected json or csv)")),
        }
    }
}

/// CSV layout: `image_id, bbox, label_name, label_id, probability`, then
/// one `p_<class>` column per class. `bbox` is `x y w h`.
pub fn predictions_to_csv(preds: &[GesturePrediction], labels: &[String]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["image_id".to_string(), "bbox".into(), "label_name".into(), "label_id".into(), "probability".into()];
    header.extend(labels.iter().map(|l| format!("p_{l}")));
    w.write_record(&header)?;
    for p in preds {
        let [x, y, bw, bh] = p.bbox.to_array();
        let mut row = vec![
            p.image_id.clone(),
            format!("{x} {y} {bw} {bh}"),
            p.label_name.clone(),
            p.label_id.to_string(),
            p.probability.to_string(),
        ];
        row.extend(p.full_distribution.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is UTF-8"))
}

pub fn export_predictions(
    preds: &[GesturePrediction],
    labels: &[String],
    path: &Path,
    format: ExportFormat,
) -> Result<(), InferenceError> {
    let body = match format {
        ExportFormat::Json => serde_json::to_string_pretty(preds).expect("predictions serialize"),
        ExportFormat::Csv => predictions_to_csv(preds, labels)
            .map_err(|e| InferenceError::Format { path: path.to_path_buf(), message: e.to_string() })?,
    };
    std::fs::write(path, body).map_err(|source| InferenceError::Io { path: path.to_path_buf(), source })
}

/// Read back a JSON export.
pub fn import_predictions(path: &Path) -> Result<Vec<GesturePrediction>, InferenceError> {
    let text = std::fs::read_to_string(path).map_err(|source| InferenceError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| InferenceError::Format { path: path.to_path_buf(), message: e.to_string() })
}
