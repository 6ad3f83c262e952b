//! COCO-style annotation files: `images`, `annotations`, `categories`, with
//! split membership given either per annotation (`"split": "train"`) or by
//! loading one file per split.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::types::{is_background, BBox, DatasetManifest, ImageRecord, LabelMap, PersonInstance};
use super::DataError;

/// How a category named `background` is treated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// Kept as a regular class with id 0.
    #[default]
    Participate,
    /// Category and its annotations are dropped.
    Exclude,
}

#[derive(Debug, Clone, Default)]
pub struct ParseOptions {
    /// Directory image `file_name`s are resolved against. Defaults to the
    /// annotation file's directory.
    pub images_root: Option<PathBuf>,
    /// Fixed label map; category names outside it are rejected.
    pub label_map: Option<LabelMap>,
    /// Split for annotations without a `split` field.
    pub default_split: Option<String>,
    pub background: BackgroundMode,
}

pub const DEFAULT_SPLIT: &str = "all";

/// One annotation file, optionally forced into a split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSource {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl AnnotationSource {
    /// `path` or `split=path`.
    pub fn parse_arg(arg: &str) -> Self {
        match arg.split_once('=') {
            Some((split, path)) if !split.is_empty() && !split.contains(['/', '\\']) => {
                Self { path: PathBuf::from(path), split: Some(split.to_string()) }
            }
            _ => Self { path: PathBuf::from(arg), split: None },
        }
    }
}

/// Parse a single annotation file.
pub fn parse_annotations(path: &Path, opts: &ParseOptions) -> Result<DatasetManifest, DataError> {
    parse_sources(&[AnnotationSource { path: path.to_path_buf(), split: None }], opts)
}

/// Parse and merge several annotation files (typically one per split).
/// Images with the same id are merged; an annotation id seen in two files
/// is kept once and listed in both splits, which validation reports.
pub fn parse_sources(sources: &[AnnotationSource], opts: &ParseOptions) -> Result<DatasetManifest, DataError> {
    let first = sources.first().ok_or_else(|| DataError::MalformedAnnotation {
        file: PathBuf::new(),
        path: "$".into(),
        message: "no annotation files given".into(),
    })?;
    let images_root = opts.images_root.clone().unwrap_or_else(|| {
        first.path.parent().map(Path::to_path_buf).unwrap_or_default()
    });

    let mut raw = Vec::with_capacity(sources.len());
    for src in sources {
        let text = std::fs::read_to_string(&src.path)
            .map_err(|source| DataError::Io { path: src.path.clone(), source })?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|source| DataError::Json { path: src.path.clone(), source })?;
        raw.push(RawFile::from_value(&value, &src.path)?);
    }

    // Label map: explicit, or the union of categories ordered by id.
    let mut categories: BTreeMap<i64, String> = BTreeMap::new();
    for file in &raw {
        for (id, name) in &file.categories {
            if let Some(prev) = categories.insert(*id, name.clone()) {
                if &prev != name {
                    return Err(DataError::MalformedAnnotation {
                        file: file.path.clone(),
                        path: "$.categories".into(),
                        message: format!("category id {id} named both {prev:?} and {name:?}"),
                    });
                }
            }
        }
    }
    let labels = match &opts.label_map {
        Some(map) => {
            for name in categories.values() {
                let dropped = is_background(name) && opts.background == BackgroundMode::Exclude;
                if !dropped && map.index_of(name).is_none() {
                    return Err(DataError::UnknownLabel { name: name.clone() });
                }
            }
            map.clone()
        }
        None => {
            let mut names: Vec<String> = Vec::new();
            let mut background = None;
            for name in categories.values() {
                if is_background(name) {
                    background = Some(name.clone());
                } else if !names.contains(name) {
                    names.push(name.clone());
                }
            }
            if let (Some(bg), BackgroundMode::Participate) = (background, opts.background) {
                names.insert(0, bg);
            }
            LabelMap::new(names)?
        }
    };

    let default_split = opts.default_split.clone().unwrap_or_else(|| DEFAULT_SPLIT.to_string());
    let mut images = Vec::new();
    let mut image_ids: HashMap<String, usize> = HashMap::new();
    let mut instances: Vec<PersonInstance> = Vec::new();
    let mut instance_ids: HashMap<String, usize> = HashMap::new();
    let mut splits: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();

    for (src, file) in sources.iter().zip(&raw) {
        for img in &file.images {
            if image_ids.contains_key(&img.id) {
                continue;
            }
            image_ids.insert(img.id.clone(), images.len());
            images.push(ImageRecord {
                image_id: img.id.clone(),
                file_name: img.file_name.clone(),
                file_path: images_root.join(&img.file_name),
                width: img.width,
                height: img.height,
            });
        }
        let local_images: BTreeSet<&str> = file.images.iter().map(|i| i.id.as_str()).collect();
        for ann in &file.annotations {
            let name = categories.get(&ann.category_id).ok_or_else(|| DataError::UnknownLabel {
                name: format!("category id {}", ann.category_id),
            })?;
            if is_background(name) && opts.background == BackgroundMode::Exclude {
                continue;
            }
            let label_id = labels.index_of(name).ok_or_else(|| DataError::UnknownLabel { name: name.clone() })?;
            if !local_images.contains(ann.image_id.as_str()) && !image_ids.contains_key(&ann.image_id) {
                return Err(DataError::DanglingImageRef {
                    instance_id: ann.id.clone(),
                    image_id: ann.image_id.clone(),
                });
            }
            let split = src.split.clone().or_else(|| ann.split.clone()).unwrap_or_else(|| default_split.clone());
            splits.entry(split).or_default().insert(ann.id.clone());
            if instance_ids.contains_key(&ann.id) {
                continue;
            }
            instance_ids.insert(ann.id.clone(), instances.len());
            instances.push(PersonInstance {
                instance_id: ann.id.clone(),
                image_id: ann.image_id.clone(),
                bbox: ann.bbox,
                label_id,
            });
        }
    }
    // Images referenced from a later file than the annotation still count.
    for inst in &instances {
        if !image_ids.contains_key(&inst.image_id) {
            return Err(DataError::DanglingImageRef {
                instance_id: inst.instance_id.clone(),
                image_id: inst.image_id.clone(),
            });
        }
    }

    Ok(DatasetManifest::new(images, instances, labels, splits, images_root))
}

/// Serialize a manifest back to a single annotation document with a
/// `split` field per annotation. Category ids are `label_id + 1`.
pub fn to_coco_json(manifest: &DatasetManifest) -> Value {
    let mut split_of: HashMap<&str, &str> = HashMap::new();
    for (split, ids) in &manifest.splits {
        for id in ids {
            split_of.entry(id.as_str()).or_insert(split.as_str());
        }
    }
    let images: Vec<Value> = manifest
        .images
        .iter()
        .map(|img| {
            json!({
                "id": id_value(&img.image_id),
                "file_name": img.file_name,
                "width": img.width,
                "height": img.height,
            })
        })
        .collect();
    let annotations: Vec<Value> = manifest
        .instances
        .iter()
        .map(|inst| {
            let mut obj = Map::new();
            obj.insert("id".into(), id_value(&inst.instance_id));
            obj.insert("image_id".into(), id_value(&inst.image_id));
            obj.insert("bbox".into(), json!(inst.bbox.to_array()));
            obj.insert("category_id".into(), json!(inst.label_id + 1));
            if let Some(split) = split_of.get(inst.instance_id.as_str()) {
                obj.insert("split".into(), json!(split));
            }
            Value::Object(obj)
        })
        .collect();
    let categories: Vec<Value> = manifest
        .labels
        .names()
        .iter()
        .enumerate()
        .map(|(i, name)| json!({"id": i + 1, "name": name}))
        .collect();
    json!({"images": images, "annotations": annotations, "categories": categories})
}

fn id_value(id: &str) -> Value {
    match id.parse::<u64>() {
        Ok(n) if n.to_string() == id => json!(n),
        _ => json!(id),
    }
}

struct RawImage {
    id: String,
    file_name: String,
    width: u32,
    height: u32,
}

struct RawAnnotation {
    id: String,
    image_id: String,
    bbox: BBox,
    category_id: i64,
    split: Option<String>,
}

struct RawFile {
    path: PathBuf,
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<(i64, String)>,
}

/// Schema walker that reports JSON paths on failure.
struct Walker<'a> {
    file: &'a Path,
}

impl Walker<'_> {
    fn err(&self, path: &str, message: impl Into<String>) -> DataError {
        DataError::MalformedAnnotation {
            file: self.file.to_path_buf(),
            path: path.to_string(),
            message: message.into(),
        }
    }

    fn object<'v>(&self, v: &'v Value, path: &str) -> Result<&'v Map<String, Value>, DataError> {
        v.as_object().ok_or_else(|| self.err(path, "expected an object"))
    }

    fn array<'v>(&self, obj: &'v Map<String, Value>, key: &str, path: &str) -> Result<&'v Vec<Value>, DataError> {
        let p = format!("{path}.{key}");
        obj.get(key)
            .ok_or_else(|| self.err(&p, "missing required key"))?
            .as_array()
            .ok_or_else(|| self.err(&p, "expected an array"))
    }

    fn field<'v>(&self, obj: &'v Map<String, Value>, key: &str, path: &str) -> Result<&'v Value, DataError> {
        obj.get(key).ok_or_else(|| self.err(&format!("{path}.{key}"), "missing required key"))
    }

    fn id(&self, obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, DataError> {
        match self.field(obj, key, path)? {
            Value::String(s) if !s.is_empty() => Ok(s.clone()),
            Value::Number(n) if n.is_u64() || n.is_i64() => Ok(n.to_string()),
            _ => Err(self.err(&format!("{path}.{key}"), "expected an integer or non-empty string id")),
        }
    }

    fn int(&self, obj: &Map<String, Value>, key: &str, path: &str) -> Result<i64, DataError> {
        self.field(obj, key, path)?
            .as_i64()
            .ok_or_else(|| self.err(&format!("{path}.{key}"), "expected an integer"))
    }

    fn dim(&self, obj: &Map<String, Value>, key: &str, path: &str) -> Result<u32, DataError> {
        let v = self.int(obj, key, path)?;
        u32::try_from(v).map_err(|_| self.err(&format!("{path}.{key}"), "expected a non-negative integer"))
    }

    fn string(&self, obj: &Map<String, Value>, key: &str, path: &str) -> Result<String, DataError> {
        self.field(obj, key, path)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| self.err(&format!("{path}.{key}"), "expected a string"))
    }
}

impl RawFile {
    fn from_value(v: &Value, file: &Path) -> Result<Self, DataError> {
        let w = Walker { file };
        let root = w.object(v, "$")?;
        let mut images = Vec::new();
        for (i, item) in w.array(root, "images", "$")?.iter().enumerate() {
            let p = format!("$.images[{i}]");
            let obj = w.object(item, &p)?;
            images.push(RawImage {
                id: w.id(obj, "id", &p)?,
                file_name: w.string(obj, "file_name", &p)?,
                width: w.dim(obj, "width", &p)?,
                height: w.dim(obj, "height", &p)?,
            });
        }
        let mut categories = Vec::new();
        for (i, item) in w.array(root, "categories", "$")?.iter().enumerate() {
            let p = format!("$.categories[{i}]");
            let obj = w.object(item, &p)?;
            categories.push((w.int(obj, "id", &p)?, w.string(obj, "name", &p)?));
        }
        let mut annotations = Vec::new();
        for (i, item) in w.array(root, "annotations", "$")?.iter().enumerate() {
            let p = format!("$.annotations[{i}]");
            let obj = w.object(item, &p)?;
            let bbox_path = format!("{p}.bbox");
            let bbox = w
                .field(obj, "bbox", &p)?
                .as_array()
                .filter(|a| a.len() == 4)
                .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<f64>>>())
                .ok_or_else(|| w.err(&bbox_path, "expected [x, y, w, h] numbers"))?;
            let split = match obj.get("split") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(_) => return Err(w.err(&format!("{p}.split"), "expected a string")),
            };
            annotations.push(RawAnnotation {
                id: w.id(obj, "id", &p)?,
                image_id: w.id(obj, "image_id", &p)?,
                bbox: BBox::new(bbox[0], bbox[1], bbox[2], bbox[3]),
                category_id: w.int(obj, "category_id", &p)?,
                split,
            });
        }
        Ok(Self { path: file.to_path_buf(), images, annotations, categories })
    }
}
