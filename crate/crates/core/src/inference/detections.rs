use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::InferenceError;
use crate::data::{BBox, DatasetManifest};

/// One person box proposed by a detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self { bbox, score }
    }

    /// Score in [0, 1], positive finite box, and overlap with the image.
    pub fn check(&self, width: u32, height: u32) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(format!("score {} outside [0, 1]", self.score));
        }
        let b = &self.bbox;
        if ![b.x, b.y, b.w, b.h].iter().all(|v| v.is_finite()) || !b.has_positive_size() {
            return Err(format!("degenerate box {:?}", b.to_array()));
        }
        if b.visible_area(width, height) <= 0.0 {
            return Err(format!("box {:?} lies outside the {width}x{height} image", b.to_array()));
        }
        Ok(())
    }
}

/// Detections keyed by image id, in file order within each image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub source: String,
    pub detections: BTreeMap<String, Vec<Detection>>,
}

impl DetectionSet {
    pub fn new(source: impl Into<String>) -> Self {
        Self { source: source.into(), detections: BTreeMap::new() }
    }

    pub fn push(&mut self, image_id: impl Into<String>, det: Detection) {
        self.detections.entry(image_id.into()).or_default().push(det);
    }

    pub fn get(&self, image_id: &str) -> &[Detection] {
        self.detections.get(image_id).map_or(&[], Vec::as_slice)
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.detections.keys().cloned().collect()
    }

    /// Total number of detections.
    pub fn len(&self) -> usize {
        self.detections.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Keep detections with `score >= threshold`.
    pub fn filtered(&self, threshold: f64) -> DetectionSet {
        let mut out = DetectionSet::new(self.source.clone());
        for (id, dets) in &self.detections {
            for d in dets.iter().filter(|d| d.score >= threshold) {
                out.push(id.clone(), *d);
            }
        }
        out
    }

    /// Ground-truth boxes of a split as score-1 detections.
    pub fn from_manifest(manifest: &DatasetManifest, split: &str) -> Result<DetectionSet, InferenceError> {
        let mut out = DetectionSet::new("ground-truth");
        for inst in manifest.split_instances(split)? {
            out.push(inst.image_id.clone(), Detection::new(inst.bbox, 1.0));
        }
        Ok(out)
    }

    /// COCO results list; numeric-looking ids are written as numbers.
    pub fn to_coco_results(&self, category_id: i64) -> Value {
        let items: Vec<Value> = self
            .detections
            .iter()
            .flat_map(|(id, dets)| {
                let image_id = match id.parse::<u64>() {
                    Ok(n) if n.to_string() == *id => json!(n),
                    _ => json!(id),
                };
                dets.iter().map(move |d| {
                    json!({"image_id": image_id, "category_id": category_id, "bbox": d.bbox.to_array(), "score": d.score})
                })
            })
            .collect();
        Value::Array(items)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionOptions {
    pub score_threshold: f64,
    /// Only keep results with this `category_id`; `None` keeps all.
    pub category_id: Option<i64>,
}

impl Default for DetectionOptions {
    fn default() -> Self {
        Self { score_threshold: 0.5, category_id: None }
    }
}

/// Read a COCO results file: `[{image_id, category_id, bbox: [x,y,w,h], score}]`.
pub fn load_detections(path: &Path, opts: &DetectionOptions) -> Result<DetectionSet, InferenceError> {
    let text = std::fs::read_to_string(path).map_err(|source| InferenceError::Io { path: path.to_path_buf(), source })?;
    let source = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    parse_detections(&text, &source, opts).map_err(|message| InferenceError::MalformedDetections {
        path: path.to_path_buf(),
        message,
    })
}

/// [`load_detections`] on an in-memory document.
pub fn parse_detections(text: &str, source: &str, opts: &DetectionOptions) -> Result<DetectionSet, String> {
    let doc: Value = serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
    let items = doc.as_array().ok_or("expected a JSON array of detections")?;
    let mut out = DetectionSet::new(source);
    for (i, item) in items.iter().enumerate() {
        let at = |msg: &str| format!("$[{i}]: {msg}");
        let obj = item.as_object().ok_or_else(|| at("expected an object"))?;
        let image_id = match obj.get("image_id") {
            Some(Value::String(s)) if !s.is_empty() => s.clone(),
            Some(Value::Number(n)) if n.is_u64() || n.is_i64() => n.to_string(),
            Some(_) => return Err(at("image_id must be an integer or non-empty string")),
            None => return Err(at("missing image_id")),
        };
        let bbox = obj.get("bbox").and_then(Value::as_array).ok_or_else(|| at("missing bbox array"))?;
        let coords: Vec<f64> = bbox.iter().filter_map(Value::as_f64).collect();
        if bbox.len() != 4 || coords.len() != 4 {
            return Err(at("bbox must be four numbers [x, y, w, h]"));
        }
        let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3]);
        if !bbox.has_positive_size() {
            return Err(at("bbox width and height must be positive"));
        }
        let score = obj.get("score").and_then(Value::as_f64).ok_or_else(|| at("missing numeric score"))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(at(&format!("score {score} outside [0, 1]")));
        }
        let category = match obj.get("category_id") {
            None | Some(Value::Null) => None,
            Some(v) => Some(v.as_i64().ok_or_else(|| at("category_id must be an integer"))?),
        };
        if let (Some(want), Some(got)) = (opts.category_id, category) {
            if want != got {
                continue;
            }
        }
        if score >= opts.score_threshold {
            out.push(image_id, Detection::new(bbox, score));
        }
    }
    Ok(out)
}
