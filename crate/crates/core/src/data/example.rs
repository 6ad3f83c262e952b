//! Turning person instances into normalized (crop, context, label) tensors.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array4, ArrayViewMut3, Axis, IxDyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::crop::extract_crop;
use super::types::{BBox, DatasetManifest, PersonInstance};
use super::DataError;
use crate::autograd::Tensor;
use crate::rng::{rng_for, Stream};

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Deterministic part of the input pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Side of the square crop input, pixels.
    pub crop_size: u32,
    /// Side of the square context input, pixels.
    pub context_size: u32,
    pub pad_ratio: f64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { crop_size: 224, context_size: 224, pad_ratio: 0.0, mean: IMAGENET_MEAN, std: IMAGENET_STD }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |what, message: String| Err(DataError::InvalidConfig { what, message });
        if self.crop_size == 0 || self.context_size == 0 {
            return bad("input size", format!("{}x{} must be positive", self.crop_size, self.context_size));
        }
        if !(0.0..=1.0).contains(&self.pad_ratio) {
            return bad("pad_ratio", format!("{} outside [0, 1]", self.pad_ratio));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return bad("std", format!("{:?} must be positive", self.std));
        }
        Ok(())
    }
}

/// Random training-time transforms and their strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { hflip_prob: 0.5, brightness: 0.1, contrast: 0.1, saturation: 0.1 }
    }
}

/// One sampled transform. Flip is geometric and mirrors crop and context
/// together; the jitter factors multiply around 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl Augmentation {
    pub const IDENTITY: Self = Self { flip: false, brightness: 1.0, contrast: 1.0, saturation: 1.0 };

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let factor = |rng: &mut dyn rand::RngCore, s: f32| {
            if s > 0.0 {
                rng.random_range(1.0 - s..=1.0 + s)
            } else {
                1.0
            }
        };
        let flip = rng.random_bool(cfg.hflip_prob.clamp(0.0, 1.0));
        let brightness = factor(rng, cfg.brightness);
        let contrast = factor(rng, cfg.contrast);
        let saturation = factor(rng, cfg.saturation);
        Self { flip, brightness, contrast, saturation }
    }

    fn is_color_identity(&self) -> bool {
        self.brightness == 1.0 && self.contrast == 1.0 && self.saturation == 1.0
    }
}

#[derive(Debug, Clone)]
pub struct Example {
    pub instance_id: String,
    /// (3, crop_size, crop_size)
    pub crop: Tensor,
    /// (3, context_size, context_size)
    pub context: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub instance_ids: Vec<String>,
    /// (N, 3, crop_size, crop_size)
    pub crop: Tensor,
    /// (N, 3, context_size, context_size)
    pub context: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn stack(examples: Vec<Example>) -> Batch {
        let crops: Vec<_> = examples.iter().map(|e| e.crop.view().insert_axis(Axis(0))).collect();
        let contexts: Vec<_> = examples.iter().map(|e| e.context.view().insert_axis(Axis(0))).collect();
        let crop = ndarray::concatenate(Axis(0), &crops).expect("uniform crop shapes");
        let context = ndarray::concatenate(Axis(0), &contexts).expect("uniform context shapes");
        Batch {
            labels: examples.iter().map(|e| e.label).collect(),
            instance_ids: examples.into_iter().map(|e| e.instance_id).collect(),
            crop,
            context,
        }
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage, DataError> {
    let img = image::ImageReader::open(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?
        .with_guessed_format()
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?
        .decode()
        .map_err(|e| DataError::ImageDecode { path: path.to_path_buf(), message: e.to_string() })?;
    Ok(img.to_rgb8())
}

pub fn resize_square(img: &RgbImage, size: u32) -> RgbImage {
    if img.dimensions() == (size, size) {
        return img.clone();
    }
    image::imageops::resize(img, size, size, FilterType::Triangle)
}

/// u8 HWC → f32 CHW in [0, 1].
pub fn to_unit_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let arr = Array4::from_shape_fn((1, 3, h, w), |(_, c, y, x)| raw[(y * w + x) * 3 + c] as f32 / 255.0);
    arr.index_axis_move(Axis(0), 0).into_dyn()
}

fn mirror(t: &mut ArrayViewMut3<f32>) {
    let w = t.shape()[2];
    for mut row in t.lanes_mut(Axis(2)) {
        for x in 0..w / 2 {
            row.swap(x, w - 1 - x);
        }
    }
}

fn jitter(t: &mut ArrayViewMut3<f32>, aug: &Augmentation) {
    if aug.is_color_identity() {
        return;
    }
    t.mapv_inplace(|v| v * aug.brightness);
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let gray = |t: &ArrayViewMut3<f32>, y: usize, x: usize| 0.299 * t[[0, y, x]] + 0.587 * t[[1, y, x]] + 0.114 * t[[2, y, x]];
    let mut mean = 0.0f32;
    for y in 0..h {
        for x in 0..w {
            mean += gray(t, y, x);
        }
    }
    mean /= (h * w) as f32;
    t.mapv_inplace(|v| (v - mean) * aug.contrast + mean);
    for y in 0..h {
        for x in 0..w {
            let g = gray(t, y, x);
            for c in 0..3 {
                t[[c, y, x]] = (t[[c, y, x]] - g) * aug.saturation + g;
            }
        }
    }
    t.mapv_inplace(|v| v.clamp(0.0, 1.0));
}

fn normalize(t: &mut Tensor, mean: &[f32; 3], std: &[f32; 3]) {
    for (c, mut plane) in t.axis_iter_mut(Axis(0)).enumerate() {
        plane.mapv_inplace(|v| (v - mean[c]) / std[c]);
    }
}

/// Resized u8 image → augmented, normalized CHW tensor.
pub fn finish_tensor(resized: &RgbImage, cfg: &PreprocessConfig, aug: &Augmentation) -> Tensor {
    let mut t = to_unit_tensor(resized);
    {
        let mut v = t.view_mut().into_dimensionality::<ndarray::Ix3>().expect("CHW");
        if aug.flip {
            mirror(&mut v);
        }
        jitter(&mut v, aug);
    }
    normalize(&mut t, &cfg.mean, &cfg.std);
    t
}

/// Crop and context tensors for one box on an already decoded image.
pub fn prepare_pair(
    image: &RgbImage,
    bbox: &BBox,
    cfg: &PreprocessConfig,
    aug: &Augmentation,
) -> Result<(Tensor, Tensor), DataError> {
    let crop = resize_square(&extract_crop(image, bbox, cfg.pad_ratio)?, cfg.crop_size);
    let context = resize_square(image, cfg.context_size);
    Ok((finish_tensor(&crop, cfg, aug), finish_tensor(&context, cfg, aug)))
}

/// Build one example straight from disk, no caching. `augment = None` is a
/// pure function of the instance and config.
pub fn make_example(
    instance: &PersonInstance,
    manifest: &DatasetManifest,
    cfg: &PreprocessConfig,
    augment: Option<&Augmentation>,
) -> Result<Example, DataError> {
    let record = manifest.image(&instance.image_id).ok_or_else(|| DataError::DanglingImageRef {
        instance_id: instance.instance_id.clone(),
        image_id: instance.image_id.clone(),
    })?;
    let image = load_rgb(&record.file_path)?;
    let (crop, context) = prepare_pair(&image, &instance.bbox, cfg, augment.unwrap_or(&Augmentation::IDENTITY))?;
    Ok(Example { instance_id: instance.instance_id.clone(), crop, context, label: instance.label_id })
}

/// Resized crops (per instance) and contexts (per image), shared across
/// epochs and threads. Full-resolution images are never kept.
#[derive(Debug, Default)]
pub struct ImageCache {
    crops: Mutex<HashMap<String, Arc<RgbImage>>>,
    contexts: Mutex<HashMap<String, Arc<RgbImage>>>,
}

impl ImageCache {
    pub fn len(&self) -> usize {
        self.crops.lock().unwrap().len() + self.contexts.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parallel, cached example construction over a manifest.
#[derive(Debug, Clone)]
pub struct ExampleLoader {
    manifest: Arc<DatasetManifest>,
    cfg: PreprocessConfig,
    cache: Arc<ImageCache>,
}

impl ExampleLoader {
    pub fn new(manifest: Arc<DatasetManifest>, cfg: PreprocessConfig) -> Result<Self, DataError> {
        cfg.validate()?;
        Ok(Self { manifest, cfg, cache: Arc::default() })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.cfg
    }

    fn resized(&self, inst: &PersonInstance) -> Result<(Arc<RgbImage>, Arc<RgbImage>), DataError> {
        let crop = self.cache.crops.lock().unwrap().get(&inst.instance_id).cloned();
        let context = self.cache.contexts.lock().unwrap().get(&inst.image_id).cloned();
        if let (Some(crop), Some(context)) = (&crop, &context) {
            return Ok((crop.clone(), context.clone()));
        }
        let record = self.manifest.image(&inst.image_id).ok_or_else(|| DataError::DanglingImageRef {
            instance_id: inst.instance_id.clone(),
            image_id: inst.image_id.clone(),
        })?;
        let image = load_rgb(&record.file_path)?;
        let crop = match crop {
            Some(c) => c,
            None => {
                let c = Arc::new(resize_square(&extract_crop(&image, &inst.bbox, self.cfg.pad_ratio)?, self.cfg.crop_size));
                self.cache.crops.lock().unwrap().insert(inst.instance_id.clone(), c.clone());
                c
            }
        };
        let context = match context {
            Some(c) => c,
            None => {
                let c = Arc::new(resize_square(&image, self.cfg.context_size));
                self.cache.contexts.lock().unwrap().insert(inst.image_id.clone(), c.clone());
                c
            }
        };
        Ok((crop, context))
    }

    pub fn example(&self, inst: &PersonInstance, aug: &Augmentation) -> Result<Example, DataError> {
        let (crop, context) = self.resized(inst)?;
        Ok(Example {
            instance_id: inst.instance_id.clone(),
            crop: finish_tensor(&crop, &self.cfg, aug),
            context: finish_tensor(&context, &self.cfg, aug),
            label: inst.label_id,
        })
    }

    /// Build a batch in parallel. With `augment`, example `i` of `epoch`
    /// draws its transform from a stream keyed by `(seed, epoch, offset + i)`.
    pub fn batch(
        &self,
        instances: &[&PersonInstance],
        augment: Option<(&AugmentConfig, u64, u64)>,
        offset: u64,
    ) -> Result<Batch, DataError> {
        let examples = instances
            .par_iter()
            .enumerate()
            .map(|(i, inst)| {
                let aug = match augment {
                    Some((cfg, seed, epoch)) => {
                        Augmentation::sample(cfg, &mut rng_for(seed, Stream::Augment, epoch, offset + i as u64))
                    }
                    None => Augmentation::IDENTITY,
                };
                self.example(inst, &aug)
            })
            .collect::<Result<Vec<_>, _>>()?;
        if examples.is_empty() {
            let s = |n: u32| Tensor::zeros(IxDyn(&[0, 3, n as usize, n as usize]));
            return Ok(Batch {
                instance_ids: vec![],
                crop: s(self.cfg.crop_size),
                context: s(self.cfg.context_size),
                labels: vec![],
            });
        }
        Ok(Batch::stack(examples))
    }
}
