use std::collections::BTreeMap;

use image::RgbImage;

use super::{Detection, DetectionSet, InferenceError};
use crate::data::BBox;

/// Person detector plug-in. Implementations only propose boxes; bounds are
/// checked by [`detect_checked`].
pub trait DetectorAdapter: Send + Sync {
    fn name(&self) -> &str;

    fn detect(&self, image_id: &str, image: &RgbImage) -> Result<Vec<Detection>, InferenceError>;

    /// Images this adapter has results for, if it is bound to a fixed set.
    fn image_ids(&self) -> Option<Vec<String>> {
        None
    }
}

/// Whole image as a single score-1 detection.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullAdapter;

impl DetectorAdapter for NullAdapter {
    fn name(&self) -> &str {
        "null"
    }

    fn detect(&self, _image_id: &str, image: &RgbImage) -> Result<Vec<Detection>, InferenceError> {
        let (w, h) = image.dimensions();
        Ok(vec![Detection::new(BBox::new(0.0, 0.0, w as f64, h as f64), 1.0)])
    }
}

/// Returns precomputed detections for each image.
#[derive(Debug, Clone)]
pub struct ReplayAdapter {
    set: DetectionSet,
}

impl ReplayAdapter {
    pub fn new(set: DetectionSet) -> Self {
        Self { set }
    }
}

impl DetectorAdapter for ReplayAdapter {
    fn name(&self) -> &str {
        "replay"
    }

    fn detect(&self, image_id: &str, _image: &RgbImage) -> Result<Vec<Detection>, InferenceError> {
        Ok(self.set.get(image_id).to_vec())
    }

    fn image_ids(&self) -> Option<Vec<String>> {
        Some(self.set.image_ids())
    }
}

/// Run an adapter and enforce the detection invariants on its output.
pub fn detect_checked(
    adapter: &dyn DetectorAdapter,
    image_id: &str,
    image: &RgbImage,
) -> Result<Vec<Detection>, InferenceError> {
    let dets = adapter.detect(image_id, image)?;
    let (w, h) = image.dimensions();
    for d in &dets {
        d.check(w, h).map_err(|message| InferenceError::InvalidDetection {
            adapter: adapter.name().to_string(),
            image_id: image_id.to_string(),
            message,
        })?;
    }
    Ok(dets)
}

/// Adapters by name.
#[derive(Default)]
pub struct AdapterRegistry {
    adapters: BTreeMap<String, Box<dyn DetectorAdapter>>,
}

impl AdapterRegistry {
    /// `null`, plus `replay` when a detection set is given.
    pub fn builtin(replay: Option<DetectionSet>) -> Self {
        let mut reg = Self::default();
        reg.register(Box::new(NullAdapter));
        if let Some(set) = replay {
            reg.register(Box::new(ReplayAdapter::new(set)));
        }
        reg
    }

    pub fn register(&mut self, adapter: Box<dyn DetectorAdapter>) {
        self.adapters.insert(adapter.name().to_string(), adapter);
    }

    pub fn names(&self) -> Vec<String> {
        self.adapters.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn DetectorAdapter, InferenceError> {
        self.adapters.get(name).map(|a| a.as_ref()).ok_or_else(|| InferenceError::AdapterUnavailable {
            name: name.to_string(),
            available: self.names(),
        })
    }
}
