use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::types::DatasetManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DuplicateImageId,
    DuplicateInstanceId,
    ImageSize,
    ImageUnreadable,
    ImageDimensions,
    DanglingImageRef,
    LabelOutOfRange,
    DegenerateBBox,
    BBoxOutsideImage,
    SplitOverlap,
    SplitUnknownInstance,
    SplitUncovered,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::DuplicateImageId => "duplicate_image_id",
            Rule::DuplicateInstanceId => "duplicate_instance_id",
            Rule::ImageSize => "image_size",
            Rule::ImageUnreadable => "image_unreadable",
            Rule::ImageDimensions => "image_dimensions",
            Rule::DanglingImageRef => "dangling_image_ref",
            Rule::LabelOutOfRange => "label_out_of_range",
            Rule::DegenerateBBox => "degenerate_bbox",
            Rule::BBoxOutsideImage => "bbox_outside_image",
            Rule::SplitOverlap => "split_overlap",
            Rule::SplitUnknownInstance => "split_unknown_instance",
            Rule::SplitUncovered => "split_uncovered",
        }
    }
}

/// One violated rule on one record (`image:<id>` or `instance:<id>`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub rule: Rule,
    pub record: String,
    pub message: String,
}

impl Issue {
    fn image(rule: Rule, id: &str, message: impl Into<String>) -> Self {
        Self { rule, record: format!("image:{id}"), message: message.into() }
    }

    fn instance(rule: Rule, id: &str, message: impl Into<String>) -> Self {
        Self { rule, record: format!("instance:{id}"), message: message.into() }
    }
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}] {}", self.record, self.rule.as_str(), self.message)
    }
}

/// Check every manifest invariant, including that image files decode to the
/// declared size. Returns an empty list iff the manifest is sound.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Issue> {
    validate(manifest, true)
}

/// Same as [`validate_manifest`] without touching the filesystem.
pub fn validate_structure(manifest: &DatasetManifest) -> Vec<Issue> {
    validate(manifest, false)
}

fn validate(manifest: &DatasetManifest, check_files: bool) -> Vec<Issue> {
    let mut issues = Vec::new();
    let mut images = HashMap::new();
    for img in &manifest.images {
        if images.insert(img.image_id.as_str(), img).is_some() {
            issues.push(Issue::image(Rule::DuplicateImageId, &img.image_id, "image id appears more than once"));
            continue;
        }
        if img.width == 0 || img.height == 0 {
            issues.push(Issue::image(
                Rule::ImageSize,
                &img.image_id,
                format!("declared size {}x{} is empty", img.width, img.height),
            ));
        }
        if check_files {
            match image::ImageReader::open(&img.file_path).and_then(|r| r.with_guessed_format()) {
                Err(e) => issues.push(Issue::image(
                    Rule::ImageUnreadable,
                    &img.image_id,
                    format!("{}: {e}", img.file_path.display()),
                )),
                Ok(reader) => match reader.into_dimensions() {
                    Err(e) => issues.push(Issue::image(
                        Rule::ImageUnreadable,
                        &img.image_id,
                        format!("{}: {e}", img.file_path.display()),
                    )),
                    Ok((w, h)) if (w, h) != (img.width, img.height) => issues.push(Issue::image(
                        Rule::ImageDimensions,
                        &img.image_id,
                        format!("file is {w}x{h}, annotation says {}x{}", img.width, img.height),
                    )),
                    Ok(_) => {}
                },
            }
        }
    }

    let c = manifest.num_classes();
    let mut seen = HashSet::new();
    for inst in &manifest.instances {
        let id = inst.instance_id.as_str();
        if !seen.insert(id) {
            issues.push(Issue::instance(Rule::DuplicateInstanceId, id, "instance id appears more than once"));
            continue;
        }
        if inst.label_id >= c {
            issues.push(Issue::instance(
                Rule::LabelOutOfRange,
                id,
                format!("label {} outside [0, {c})", inst.label_id),
            ));
        }
        let Some(img) = images.get(inst.image_id.as_str()) else {
            issues.push(Issue::instance(
                Rule::DanglingImageRef,
                id,
                format!("image {} does not exist", inst.image_id),
            ));
            continue;
        };
        let b = inst.bbox;
        if !b.has_positive_size() || !b.x.is_finite() || !b.y.is_finite() {
            issues.push(Issue::instance(
                Rule::DegenerateBBox,
                id,
                format!("bbox [{}, {}, {}, {}] needs w > 0 and h > 0", b.x, b.y, b.w, b.h),
            ));
        } else if b.visible_area(img.width, img.height) <= 0.0 {
            issues.push(Issue::instance(
                Rule::BBoxOutsideImage,
                id,
                format!("bbox does not intersect the {}x{} image", img.width, img.height),
            ));
        }
    }

    let mut membership: HashMap<&str, &str> = HashMap::new();
    for (split, ids) in &manifest.splits {
        for id in ids {
            if !seen.contains(id.as_str()) {
                issues.push(Issue::instance(
                    Rule::SplitUnknownInstance,
                    id,
                    format!("listed in split {split:?} but not annotated"),
                ));
            }
            if let Some(first) = membership.insert(id.as_str(), split.as_str()) {
                issues.push(Issue::instance(
                    Rule::SplitOverlap,
                    id,
                    format!("member of both {first:?} and {split:?}"),
                ));
            }
        }
    }
    for inst in &manifest.instances {
        if !membership.contains_key(inst.instance_id.as_str()) && seen.remove(inst.instance_id.as_str()) {
            issues.push(Issue::instance(Rule::SplitUncovered, &inst.instance_id, "not assigned to any split"));
        }
    }
    issues
}
