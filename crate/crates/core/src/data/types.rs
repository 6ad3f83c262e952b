use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Ordered class names; a class id is its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelMap {
    names: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LabelMap {
    pub const BACKGROUND: &'static str = "background";

    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self, DataError> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(DataError::InvalidLabelMap(format!(
                "need at least 2 classes, got {}",
                names.len()
            )));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(DataError::InvalidLabelMap(format!("class {i} has an empty name")));
            }
            if index.insert(name.clone(), i).is_some() {
                return Err(DataError::InvalidLabelMap(format!("duplicate class name {name:?}")));
            }
        }
        Ok(Self { names, index })
    }

    /// `class_0 .. class_{n-1}`, for models built before a dataset is known.
    pub fn generic(n: usize) -> Result<Self, DataError> {
        Self::new((0..n).map(|i| format!("class_{i}")))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn background_id(&self) -> Option<usize> {
        self.names.iter().position(|n| is_background(n))
    }
}

impl TryFrom<Vec<String>> for LabelMap {
    type Error = DataError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(names)
    }
}

impl From<LabelMap> for Vec<String> {
    fn from(map: LabelMap) -> Self {
        map.names
    }
}

pub(crate) fn is_background(name: &str) -> bool {
    name.eq_ignore_ascii_case(LabelMap::BACKGROUND)
}

/// Axis-aligned box in pixels: left, top, width, height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn has_positive_size(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.w.is_finite() && self.h.is_finite()
    }

    /// Area of the intersection with a `width` x `height` image.
    pub fn visible_area(&self, width: u32, height: u32) -> f64 {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        (x1 - x0).max(0.0) * (y1 - y0).max(0.0)
    }

    pub fn clamp_to(&self, width: u32, height: u32) -> Option<BBox> {
        let x0 = self.x.max(0.0);
        let y0 = self.y.max(0.0);
        let x1 = (self.x + self.w).min(width as f64);
        let y1 = (self.y + self.h).min(height as f64);
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, w, h]: [f64; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    /// Name as written in the annotation file.
    pub file_name: String,
    /// `file_name` resolved against the images root.
    pub file_path: PathBuf,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonInstance {
    pub instance_id: String,
    pub image_id: String,
    pub bbox: BBox,
    pub label_id: usize,
}

/// Images, person instances, label map and split membership.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub images: Vec<ImageRecord>,
    pub instances: Vec<PersonInstance>,
    pub labels: LabelMap,
    pub splits: BTreeMap<String, BTreeSet<String>>,
    pub images_root: PathBuf,
    image_index: HashMap<String, usize>,
    instance_index: HashMap<String, usize>,
}

impl PartialEq for DatasetManifest {
    fn eq(&self, other: &Self) -> bool {
        self.images == other.images
            && self.instances == other.instances
            && self.labels == other.labels
            && self.splits == other.splits
            && self.images_root == other.images_root
    }
}

impl DatasetManifest {
    pub fn new(
        images: Vec<ImageRecord>,
        instances: Vec<PersonInstance>,
        labels: LabelMap,
        splits: BTreeMap<String, BTreeSet<String>>,
        images_root: PathBuf,
    ) -> Self {
        // First occurrence wins for duplicated ids; validation reports them.
        let mut image_index = HashMap::new();
        for (i, img) in images.iter().enumerate() {
            image_index.entry(img.image_id.clone()).or_insert(i);
        }
        let mut instance_index = HashMap::new();
        for (i, inst) in instances.iter().enumerate() {
            instance_index.entry(inst.instance_id.clone()).or_insert(i);
        }
        Self { images, instances, labels, splits, images_root, image_index, instance_index }
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.image_index.get(image_id).map(|&i| &self.images[i])
    }

    pub fn instance(&self, instance_id: &str) -> Option<&PersonInstance> {
        self.instance_index.get(instance_id).map(|&i| &self.instances[i])
    }

    pub fn split_names(&self) -> Vec<&str> {
        self.splits.keys().map(String::as_str).collect()
    }

    pub fn has_split(&self, split: &str) -> bool {
        self.splits.contains_key(split)
    }

    /// Instances of `split`, in annotation-file order.
    pub fn split_instances(&self, split: &str) -> Result<Vec<&PersonInstance>, DataError> {
        let members = self.splits.get(split).ok_or_else(|| DataError::UnknownSplit {
            split: split.to_string(),
            available: self.splits.keys().cloned().collect(),
        })?;
        let mut seen = BTreeSet::new();
        Ok(self
            .instances
            .iter()
            .filter(|inst| members.contains(&inst.instance_id) && seen.insert(inst.instance_id.as_str()))
            .collect())
    }

    /// Per-class counts for one split, in label-id order, zero counts included.
    pub fn class_distribution(&self, split: &str) -> Result<ClassDistribution, DataError> {
        let mut counts = vec![0usize; self.labels.len()];
        for inst in self.split_instances(split)? {
            if let Some(c) = counts.get_mut(inst.label_id) {
                *c += 1;
            }
        }
        Ok(ClassDistribution {
            split: split.to_string(),
            counts: self
                .labels
                .names()
                .iter()
                .zip(counts)
                .map(|(name, count)| ClassCount { class: name.clone(), count })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub class: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub split: String,
    pub counts: Vec<ClassCount>,
}

impl ClassDistribution {
    pub fn get(&self, class: &str) -> Option<usize> {
        self.counts.iter().find(|c| c.class == class).map(|c| c.count)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c.count).sum()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.counts.iter().map(|c| c.count).collect()
    }

    /// Drop the background class, as distribution plots usually do.
    pub fn without_background(&self) -> ClassDistribution {
        ClassDistribution {
            split: self.split.clone(),
            counts: self.counts.iter().filter(|c| !is_background(&c.class)).cloned().collect(),
        }
    }

    /// `class,count` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count\n");
        for c in &self.counts {
            out.push_str(&format!("{},{}\n", csv_field(&c.class), c.count));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
