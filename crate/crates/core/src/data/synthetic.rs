//! Small generated datasets with a known signal, for sanity runs and tests.
//!
//! Each image holds one person box on a colored background. Depending on
//! [`SyntheticMode`] the class is encoded in the box pixels or only in the
//! background.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::coco::{parse_annotations, ParseOptions};
use super::types::DatasetManifest;
use super::DataError;
use crate::rng::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticMode {
    /// Box color and stripes encode the class; the background agrees with
    /// the class most of the time.
    CropEncodes,
    /// Boxes come from a two-pattern pool drawn independently of the class;
    /// only the background color tells classes apart.
    ContextOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_size: u32,
    pub box_size: u32,
    pub mode: SyntheticMode,
    /// Probability that the background shows the true class in `CropEncodes`.
    pub context_agreement: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            per_class: 10,
            val_per_class: 0,
            test_per_class: 0,
            image_size: 32,
            box_size: 14,
            mode: SyntheticMode::CropEncodes,
            context_agreement: 0.8,
            seed: 0,
        }
    }
}

fn hue(i: usize, n: usize, value: f32) -> [u8; 3] {
    let h = i as f32 / n as f32 * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [(r * value * 255.0) as u8, (g * value * 255.0) as u8, (b * value * 255.0) as u8]
}

fn draw_box(img: &mut RgbImage, x0: u32, y0: u32, size: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    for y in 0..size {
        for x in 0..size {
            img.put_pixel(x0 + x, y0 + y, Rgb(f(x, y)));
        }
    }
}

/// Write the images plus `annotations.json` under `dir` and return the
/// parsed manifest. Splits are `train`, and `val` / `test` when requested.
pub fn generate(cfg: &SyntheticConfig, dir: &Path) -> Result<DatasetManifest, DataError> {
    if cfg.classes < 2 || cfg.box_size == 0 || cfg.box_size > cfg.image_size {
        return Err(DataError::InvalidConfig {
            what: "synthetic dataset",
            message: format!(
                "need >= 2 classes and 0 < box_size <= image_size, got {} classes, box {}, image {}",
                cfg.classes, cfg.box_size, cfg.image_size
            ),
        });
    }
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io { path: dir.to_path_buf(), source })?;
    let c = cfg.classes;
    let s = cfg.image_size;
    let b = cfg.box_size;
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut next_id = 1u64;

    for (split_idx, (split, per_class)) in
        [("train", cfg.per_class), ("val", cfg.val_per_class), ("test", cfg.test_per_class)].into_iter().enumerate()
    {
        if per_class == 0 {
            continue;
        }
        let mut rng = rng_for(cfg.seed, Stream::Synthetic, split_idx as u64, 0);
        // Balanced pattern assignment per class so no pattern predicts a class.
        let mut patterns: Vec<Vec<usize>> = (0..c)
            .map(|_| {
                let mut p: Vec<usize> = (0..per_class).map(|i| i % 2).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        for k in 0..per_class {
            for class in 0..c {
                let id = next_id;
                next_id += 1;
                let x0 = rng.random_range(0..=s - b);
                let y0 = rng.random_range(0..=s - b);
                let (bg, pattern) = match cfg.mode {
                    SyntheticMode::CropEncodes => {
                        let cue = if rng.random_bool(cfg.context_agreement) { class } else { rng.random_range(0..c) };
                        (hue(cue, c, 0.45), None)
                    }
                    SyntheticMode::ContextOnly => (hue(class, c, 0.9), Some(patterns[class].pop().unwrap_or(k % 2))),
                };
                let mut img = RgbImage::from_pixel(s, s, Rgb(bg));
                match pattern {
                    None => {
                        let fg = hue(class, c, 1.0);
                        let period = 2 + (class % 3) as u32;
                        let noise: Vec<i16> = (0..b * b).map(|_| rng.random_range(-12..=12)).collect();
                        draw_box(&mut img, x0, y0, b, |x, y| {
                            let stripe = if (x / period) % 2 == 0 { 1.0 } else { 0.6 };
                            let n = noise[(y * b + x) as usize];
                            fg.map(|v| ((v as f32 * stripe) as i16 + n).clamp(0, 255) as u8)
                        });
                    }
                    Some(p) => draw_box(&mut img, x0, y0, b, |x, y| {
                        let on = if p == 0 { (x + y) % 4 < 2 } else { (x / 3) % 2 == 0 };
                        if on {
                            [235, 235, 235]
                        } else {
                            [25, 25, 25]
                        }
                    }),
                }
                let file_name = format!("{split}_{id:05}.png");
                img.save(dir.join(&file_name))
                    .map_err(|e| DataError::ImageDecode { path: dir.join(&file_name), message: e.to_string() })?;
                images.push(json!({"id": id, "file_name": file_name, "width": s, "height": s}));
                annotations.push(json!({
                    "id": id,
                    "image_id": id,
                    "bbox": [x0, y0, b, b],
                    "category_id": class + 1,
                    "split": split,
                }));
            }
        }
    }
    let categories: Vec<_> = (0..c).map(|i| json!({"id": i + 1, "name": format!("class_{i}")})).collect();
    let doc = json!({"images": images, "annotations": annotations, "categories": categories});
    let path = dir.join("annotations.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&doc).expect("json"))
        .map_err(|source| DataError::Io { path: path.clone(), source })?;
    parse_annotations(&path, &ParseOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_manifest;

    #[test]
    fn generated_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { per_class: 4, test_per_class: 2, ..Default::default() };
        let m = generate(&cfg, dir.path()).unwrap();
        assert_eq!(m.instances.len(), 36);
        assert_eq!(validate_manifest(&m), vec![]);
        assert_eq!(m.class_distribution("train").unwrap().counts(), vec![4; 6]);
        assert_eq!(m.split_names(), vec!["test", "train"]);
    }

    #[test]
    fn context_only_crops_do_not_carry_class() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { mode: SyntheticMode::ContextOnly, ..Default::default() };
        let m = generate(&cfg, dir.path()).unwrap();
        let mut per_pattern = std::collections::HashMap::<Vec<u8>, Vec<usize>>::new();
        for inst in &m.instances {
            let img = image::open(&m.image(&inst.image_id).unwrap().file_path).unwrap().to_rgb8();
            let crop = crate::data::extract_crop(&img, &inst.bbox, 0.0).unwrap();
            per_pattern.entry(crop.into_raw()).or_default().push(inst.label_id);
        }
        assert_eq!(per_pattern.len(), 2);
        for labels in per_pattern.values() {
            let mut counts = [0usize; 6];
            labels.iter().for_each(|&l| counts[l] += 1);
            assert_eq!(counts, [5; 6]);
        }
    }

    #[test]
    fn same_seed_same_pixels() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { per_class: 2, ..Default::default() };
        let ma = generate(&cfg, a.path()).unwrap();
        let mb = generate(&cfg, b.path()).unwrap();
        assert_eq!(ma.instances, mb.instances);
        let pa = std::fs::read(&ma.images[5].file_path).unwrap();
        let pb = std::fs::read(&mb.images[5].file_path).unwrap();
        assert_eq!(pa, pb);
    }
}
