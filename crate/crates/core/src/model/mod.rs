//! Two-stream network: person-crop backbone, context backbone, concatenation
//! and a four-layer fully connected head.

mod checkpoint;
mod head;
mod hrnet;
pub mod pretrained;
mod resnet;
mod swin;
mod tiny;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::IxDyn;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, read_header, save_checkpoint, save_checkpoint_with, CheckpointHeader, ParamEntry, CONCAT_ORDER,
    FORMAT_VERSION,
};
pub use head::{Activation, FusionHead, FusionHeadConfig};
pub use hrnet::HrNet;
pub use resnet::ResNet;
pub use swin::SwinV2;
pub use tiny::TinyNet;

use crate::autograd::{Graph, Param, Tensor, Var};
use crate::data::{LabelMap, PreprocessConfig};
use crate::nn::{join, Linear, Module};
use crate::rng::{rng_for, Stream};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown backbone {name:?} (expected one of: {})", BackboneFamily::NAMES.join(", "))]
    UnknownBackbone { name: String },
    #[error("pretrained weights for {family} unavailable at {}: {reason}", path.display())]
    PretrainedWeightsUnavailable { family: String, path: PathBuf, reason: String },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: String, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneFamily {
    Resnet50,
    Resnet101,
    HrnetW32,
    SwinV2,
    TinyTest,
}

impl BackboneFamily {
    pub const ALL: [BackboneFamily; 5] = [Self::Resnet50, Self::Resnet101, Self::HrnetW32, Self::SwinV2, Self::TinyTest];
    pub const NAMES: [&'static str; 5] = ["resnet50", "resnet101", "hrnet_w32", "swin_v2", "tiny_test"];

    pub fn as_str(self) -> &'static str {
        Self::NAMES[Self::ALL.iter().position(|f| *f == self).expect("listed")]
    }

    /// Width of the pooled output before any projection.
    pub fn native_dim(self) -> usize {
        match self {
            Self::Resnet50 | Self::Resnet101 => ResNet::FEATURES,
            Self::HrnetW32 => HrNet::FEATURES,
            Self::SwinV2 => SwinV2::FEATURES,
            Self::TinyTest => TinyNet::FEATURES,
        }
    }

    /// Name used in rendered result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Self::Resnet50 => "ResNet-50",
            Self::Resnet101 => "ResNet-101",
            Self::HrnetW32 => "HRNet-W32",
            Self::SwinV2 => "SwinV2",
            Self::TinyTest => "TinyTest",
        }
    }

    fn check_input(self, size: u32) -> Result<(), String> {
        let ok = match self {
            Self::TinyTest => size >= 4,
            Self::Resnet50 | Self::Resnet101 => size >= 32,
            Self::HrnetW32 => size >= 32 && size % 32 == 0,
            Self::SwinV2 => size >= 64 && size % 32 == 0,
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{} cannot take {size}x{size} inputs", self.as_str()))
        }
    }
}

impl fmt::Display for BackboneFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneFamily {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let compact: String = s.trim().to_ascii_lowercase().chars().filter(|c| !matches!(c, '-' | '_' | ' ')).collect();
        let compact = match compact.as_str() {
            "swinv2tiny" => "swinv2",
            "hrnet" => "hrnetw32",
            other => other,
        };
        Self::NAMES
            .iter()
            .position(|n| n.replace('_', "") == compact)
            .map(|i| Self::ALL[i])
            .ok_or_else(|| ModelError::UnknownBackbone { name: s.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: BackboneFamily,
    #[serde(default)]
    pub pretrained: bool,
    /// Override of the pooled width; adds a linear projection.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    /// Side of the square input this branch is built for.
    pub input_size: u32,
}

impl BackboneSpec {
    pub fn new(family: BackboneFamily, input_size: u32) -> Self {
        Self { family, pretrained: false, feature_dim: None, input_size }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim.unwrap_or_else(|| self.family.native_dim())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.feature_dim == Some(0) {
            return Err(ModelError::InvalidConfig("feature_dim must be positive".into()));
        }
        self.family.check_input(self.input_size).map_err(ModelError::InvalidConfig)
    }
}

/// Whether evaluation feeds the context branch or replaces its features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    WithContext,
    WithoutContext,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::WithContext => "with_context",
            Variant::WithoutContext => "without_context",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::WithContext => "With Context",
            Variant::WithoutContext => "Without Context",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace([' ', '-'], "_").as_str() {
            "with_context" => Ok(Variant::WithContext),
            "without_context" => Ok(Variant::WithoutContext),
            other => Err(format!("unknown variant {other:?} (expected with_context or without_context)")),
        }
    }
}

/// Full architecture description; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub crop: BackboneSpec,
    /// `None` builds the ablation without a context branch.
    pub context: Option<BackboneSpec>,
    pub head: FusionHeadConfig,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        self.crop.validate()?;
        if let Some(c) = &self.context {
            c.validate()?;
        }
        self.head.validate()
    }

    pub fn head_input_dim(&self) -> usize {
        self.crop.feature_dim() + self.context.as_ref().map_or(0, BackboneSpec::feature_dim)
    }
}

#[derive(Debug, Clone)]
enum Net {
    Tiny(TinyNet),
    ResNet(Box<ResNet>),
    HrNet(Box<HrNet>),
    Swin(Box<SwinV2>),
}

/// One feature extractor: network, global pooling and optional projection.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    net: Net,
    proj: Option<Linear>,
}

impl Backbone {
    pub fn new(spec: &BackboneSpec, rng: &mut impl Rng) -> Result<Self, ModelError> {
        spec.validate()?;
        let net = match spec.family {
            BackboneFamily::TinyTest => Net::Tiny(TinyNet::new(rng)),
            BackboneFamily::Resnet50 => Net::ResNet(Box::new(ResNet::new([3, 4, 6, 3], rng))),
            BackboneFamily::Resnet101 => Net::ResNet(Box::new(ResNet::new([3, 4, 23, 3], rng))),
            BackboneFamily::HrnetW32 => Net::HrNet(Box::new(HrNet::w32(rng))),
            BackboneFamily::SwinV2 => Net::Swin(Box::new(SwinV2::tiny(spec.input_size as usize, rng))),
        };
        let native = spec.family.native_dim();
        let proj = spec.feature_dim.filter(|&d| d != native).map(|d| Linear::new(native, d, true, rng));
        let mut backbone = Self { spec: spec.clone(), net, proj };
        if spec.pretrained {
            pretrained::load_pretrained(&mut backbone)?;
        }
        Ok(backbone)
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn feature_dim(&self) -> usize {
        self.proj.as_ref().map_or(self.spec.family.native_dim(), Linear::out_features)
    }

    /// Parameters of the network proper, excluding the projection.
    pub(crate) fn visit_net_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        match &mut self.net {
            Net::Tiny(n) => n.visit_mut("", f),
            Net::ResNet(n) => n.visit_mut("", f),
            Net::HrNet(n) => n.visit_mut("", f),
            Net::Swin(n) => n.visit_mut("", f),
        }
    }

    fn check_input(&self, x: &Var, what: &str) -> Result<(), ModelError> {
        let s = self.spec.input_size as usize;
        match x.shape() {
            [_, 3, h, w] if *h == s && *w == s => Ok(()),
            other => Err(ModelError::ShapeMismatch(format!("{what} batch has shape {other:?}, expected (N, 3, {s}, {s})"))),
        }
    }

    /// (N, 3, S, S) → (N, feature_dim).
    pub fn forward(&self, g: &Graph, x: &Var) -> Var {
        let y = match &self.net {
            Net::Tiny(n) => n.forward(g, x),
            Net::ResNet(n) => n.forward(g, x),
            Net::HrNet(n) => n.forward(g, x),
            Net::Swin(n) => n.forward(g, x),
        };
        match &self.proj {
            Some(p) => p.forward(g, &y),
            None => y,
        }
    }
}

impl Module for Backbone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        let body = join(prefix, "body");
        match &self.net {
            Net::Tiny(n) => n.visit(&body, f),
            Net::ResNet(n) => n.visit(&body, f),
            Net::HrNet(n) => n.visit(&body, f),
            Net::Swin(n) => n.visit(&body, f),
        }
        if let Some(p) = &self.proj {
            p.visit(&join(prefix, "proj"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        let body = join(prefix, "body");
        match &mut self.net {
            Net::Tiny(n) => n.visit_mut(&body, f),
            Net::ResNet(n) => n.visit_mut(&body, f),
            Net::HrNet(n) => n.visit_mut(&body, f),
            Net::Swin(n) => n.visit_mut(&body, f),
        }
        if let Some(p) = &mut self.proj {
            p.visit_mut(&join(prefix, "proj"), f);
        }
    }
}

/// Crop branch, optional context branch and fusion head. Branches never
/// share parameters.
#[derive(Debug, Clone)]
pub struct TwoStreamModel {
    config: ModelConfig,
    labels: LabelMap,
    pub crop: Backbone,
    pub context: Option<Backbone>,
    pub head: FusionHead,
    /// Input preparation the weights expect; saved with checkpoints.
    pub preprocess: PreprocessConfig,
}

/// Build a freshly initialized model; all initialization randomness comes
/// from `seed`.
pub fn build_model(config: &ModelConfig, labels: LabelMap, seed: u64) -> Result<TwoStreamModel, ModelError> {
    config.validate()?;
    if labels.len() != config.num_classes {
        return Err(ModelError::InvalidConfig(format!(
            "label map has {} classes, config says {}",
            labels.len(),
            config.num_classes
        )));
    }
    let crop = Backbone::new(&config.crop, &mut rng_for(seed, Stream::Init, 0, 0))?;
    let context = match &config.context {
        Some(spec) => Some(Backbone::new(spec, &mut rng_for(seed, Stream::Init, 1, 0))?),
        None => None,
    };
    let head = FusionHead::new(config.head_input_dim(), &config.head, config.num_classes, &mut rng_for(seed, Stream::Init, 2, 0));
    let preprocess = PreprocessConfig {
        crop_size: config.crop.input_size,
        context_size: config.context.as_ref().map_or(config.crop.input_size, |c| c.input_size),
        ..PreprocessConfig::default()
    };
    Ok(TwoStreamModel { config: config.clone(), labels, crop, context, head, preprocess })
}

impl TwoStreamModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn has_context(&self) -> bool {
        self.context.is_some()
    }

    /// Per-branch features: `(N, d1)` from crops, `(N, d2)` from contexts
    /// (absent without a context branch).
    pub fn extract_features(&self, g: &Graph, crop: &Var, context: Option<&Var>) -> Result<(Var, Option<Var>), ModelError> {
        self.crop.check_input(crop, "crop")?;
        let f_person = self.crop.forward(g, crop);
        let f_context = match (&self.context, context) {
            (Some(branch), Some(ctx)) => {
                branch.check_input(ctx, "context")?;
                if ctx.shape()[0] != crop.shape()[0] {
                    return Err(ModelError::ShapeMismatch(format!(
                        "crop batch {} vs context batch {}",
                        crop.shape()[0],
                        ctx.shape()[0]
                    )));
                }
                Some(branch.forward(g, ctx))
            }
            (Some(_), None) => return Err(ModelError::ShapeMismatch("model needs a context batch".into())),
            (None, _) => None,
        };
        Ok((f_person, f_context))
    }

    /// Head over `concat(f_person, f_context)`, person first.
    pub fn fuse_and_classify(&self, g: &Graph, f_person: &Var, f_context: Option<&Var>) -> Result<Var, ModelError> {
        let d1 = self.crop.feature_dim();
        let check = |v: &Var, d: usize, what: &str| match v.shape() {
            [_, w] if *w == d => Ok(()),
            other => Err(ModelError::ShapeMismatch(format!("{what} features {other:?}, expected (N, {d})"))),
        };
        check(f_person, d1, "person")?;
        let fused = match (&self.context, f_context) {
            (Some(branch), Some(fc)) => {
                check(fc, branch.feature_dim(), "context")?;
                if fc.shape()[0] != f_person.shape()[0] {
                    return Err(ModelError::ShapeMismatch("feature batch sizes differ".into()));
                }
                g.concat(&[f_person, fc], 1)
            }
            (None, None) => f_person.clone(),
            (Some(_), None) => return Err(ModelError::ShapeMismatch("missing context features".into())),
            (None, Some(_)) => return Err(ModelError::ShapeMismatch("model has no context branch".into())),
        };
        Ok(self.head.forward(g, &fused))
    }

    /// Logits `(N, C)`. `WithoutContext` on a model that has a context
    /// branch skips that branch and feeds zeros in its place.
    pub fn forward(&self, g: &Graph, crop: &Var, context: Option<&Var>, variant: Variant) -> Result<Var, ModelError> {
        match (variant, &self.context) {
            (Variant::WithContext, None) => {
                Err(ModelError::InvalidConfig("with_context requested but the model has no context branch".into()))
            }
            (Variant::WithoutContext, Some(branch)) => {
                self.crop.check_input(crop, "crop")?;
                let f_person = self.crop.forward(g, crop);
                let zeros = g.constant(Tensor::zeros(IxDyn(&[crop.shape()[0], branch.feature_dim()])));
                self.fuse_and_classify(g, &f_person, Some(&zeros))
            }
            _ => {
                let (f_person, f_context) = self.extract_features(g, crop, context)?;
                self.fuse_and_classify(g, &f_person, f_context.as_ref())
            }
        }
    }

    /// Deterministic eval-mode logits for a batch of tensors.
    pub fn predict_logits(&self, crop: &Tensor, context: Option<&Tensor>, variant: Variant) -> Result<Tensor, ModelError> {
        let g = Graph::inference();
        let crop = g.constant(crop.clone());
        let context = context.map(|c| g.constant(c.clone()));
        Ok(self.forward(&g, &crop, context.as_ref(), variant)?.into_value())
    }

    /// The variant a model evaluates by default.
    pub fn default_variant(&self) -> Variant {
        if self.has_context() {
            Variant::WithContext
        } else {
            Variant::WithoutContext
        }
    }

    /// Name → parameter, in visiting order.
    pub fn named_params(&self) -> Vec<(String, Param)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, p| out.push((name.to_string(), p.clone())));
        out
    }
}

impl Module for TwoStreamModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.crop.visit(&join(prefix, "crop"), f);
        if let Some(c) = &self.context {
            c.visit(&join(prefix, "context"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.crop.visit_mut(&join(prefix, "crop"), f);
        if let Some(c) = &mut self.context {
            c.visit_mut(&join(prefix, "context"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests;
