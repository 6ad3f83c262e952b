//! Annotation ingestion, validation, cropping and example construction.

mod coco;
mod crop;
mod example;
pub mod synthetic;
mod types;
mod validate;

use std::path::PathBuf;

pub use coco::{
    parse_annotations, parse_sources, to_coco_json, AnnotationSource, BackgroundMode, ParseOptions, DEFAULT_SPLIT,
};
pub use crop::{crop_region, extract_crop};
pub use example::{
    finish_tensor, load_rgb, make_example, prepare_pair, resize_square, to_unit_tensor, AugmentConfig, Augmentation,
    Batch, Example, ExampleLoader, ImageCache, PreprocessConfig, IMAGENET_MEAN, IMAGENET_STD,
};
pub use types::{BBox, ClassCount, ClassDistribution, DatasetManifest, ImageRecord, LabelMap, PersonInstance};
pub use validate::{validate_manifest, validate_structure, Issue, Rule};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid label map: {0}")]
    InvalidLabelMap(String),
    #[error("unknown split {split:?} (available: {})", available.join(", "))]
    UnknownSplit { split: String, available: Vec<String> },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: invalid JSON: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: malformed annotation at {path}: {message}", file.display())]
    MalformedAnnotation { file: PathBuf, path: String, message: String },
    #[error("unknown label {name:?}")]
    UnknownLabel { name: String },
    #[error("instance {instance_id} references missing image {image_id}")]
    DanglingImageRef { instance_id: String, image_id: String },
    #[error("crop box {bbox:?} does not intersect the {width}x{height} image")]
    EmptyCrop { bbox: [f64; 4], width: u32, height: u32 },
    #[error("{}: cannot decode image: {message}", path.display())]
    ImageDecode { path: PathBuf, message: String },
    #[error("invalid {what}: {message}")]
    InvalidConfig { what: &'static str, message: String },
    #[error("unknown instance {0}")]
    UnknownInstance(String),
}
