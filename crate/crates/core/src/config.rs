//! Layered run configuration addressed by flat dotted keys
//! (`train.batch_size`). Resolution order: defaults, then a TOML/JSON
//! document, then `key=value` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{BackgroundMode, PreprocessConfig};
use crate::inference::{ExportFormat, InferConfig};
use crate::model::{BackboneFamily, BackboneSpec, FusionHeadConfig, ModelConfig, Variant};
use crate::training::TrainConfig;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {key:?}{}", suggestion.as_ref().map(|s| format!(" (did you mean {s:?}?)")).unwrap_or_default())]
    UnknownKey { key: String, suggestion: Option<String> },
    #[error("config key {key:?}: expected {expected}, got {found}")]
    TypeError { key: String, expected: String, found: String },
    #[error("override {0:?} is not of the form key=value")]
    MalformedOverride(String),
    #[error("{path}: {message}")]
    Document { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    /// Directory image file names resolve against; defaults to the
    /// annotation file's directory.
    pub images_root: Option<PathBuf>,
    pub background: BackgroundMode,
    /// Split for annotations that carry none.
    pub default_split: Option<String>,
    #[serde(flatten)]
    pub preprocess: PreprocessConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { images_root: None, background: BackgroundMode::Participate, default_split: None, preprocess: PreprocessConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub backbone: BackboneFamily,
    /// Family of the context branch; defaults to `backbone`.
    pub context_backbone: Option<BackboneFamily>,
    /// `false` builds the ablation without a context branch.
    pub with_context: bool,
    pub pretrained: bool,
    /// Linear projection of pooled features to this width.
    pub feature_dim: Option<usize>,
    #[serde(flatten)]
    pub head: FusionHeadConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            backbone: BackboneFamily::Resnet50,
            context_backbone: None,
            with_context: true,
            pretrained: true,
            feature_dim: None,
            head: FusionHeadConfig::default(),
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, num_classes: usize, pre: &PreprocessConfig) -> ModelConfig {
        let spec = |family, size| BackboneSpec { family, pretrained: self.pretrained, feature_dim: self.feature_dim, input_size: size };
        ModelConfig {
            crop: spec(self.backbone, pre.crop_size),
            context: self.with_context.then(|| spec(self.context_backbone.unwrap_or(self.backbone), pre.context_size)),
            head: self.head.clone(),
            num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    /// One independent run per seed; empty means a single run with `seed`.
    pub seeds: Vec<u64>,
    /// Evaluated after each run when present in the data.
    pub test_split: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { config: TrainConfig::default(), seeds: vec![0, 1, 2, 3, 4], test_split: "test".into() }
    }
}

impl TrainSection {
    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.config.seed]
        } else {
            self.seeds.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub split: String,
    /// Defaults to the checkpoint's own variant.
    pub variant: Option<Variant>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { split: "test".into(), variant: None, batch_size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferSection {
    pub score_threshold: f64,
    pub batch_size: usize,
    /// `replay` when a detections file is given, `null` otherwise.
    pub adapter: Option<String>,
    /// Keep only detections of this category.
    pub category_id: Option<i64>,
    pub variant: Option<Variant>,
    /// Defaults to the output file extension.
    pub format: Option<ExportFormat>,
}

impl Default for InferSection {
    fn default() -> Self {
        Self { score_threshold: 0.5, batch_size: 32, adapter: None, category_id: None, variant: None, format: None }
    }
}

impl InferSection {
    pub fn infer_config(&self) -> InferConfig {
        InferConfig { score_threshold: self.score_threshold, batch_size: self.batch_size, variant: self.variant }
    }
}

/// Everything a command can be configured with.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToolkitConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub infer: InferSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    UInt,
    Int,
    Float,
    Bool,
    Str,
    Path,
    Choice(&'static [&'static str]),
    Backbone,
    UIntList,
    FloatTriple,
}

impl Kind {
    pub fn describe(self) -> String {
        match self {
            Kind::UInt => "non-negative integer".into(),
            Kind::Int => "integer".into(),
            Kind::Float => "number".into(),
            Kind::Bool => "boolean".into(),
            Kind::Str => "string".into(),
            Kind::Path => "path".into(),
            Kind::Choice(c) => format!("one of {}", c.join("|")),
            Kind::Backbone => format!("one of {}", BackboneFamily::NAMES.join("|")),
            Kind::UIntList => "list of non-negative integers".into(),
            Kind::FloatTriple => "list of 3 numbers".into(),
        }
    }
}

/// A documented configuration key.
#[derive(Debug, Clone, Copy)]
pub struct KeyDoc {
    pub key: &'static str,
    pub kind: Kind,
    /// Accepts `none`.
    pub optional: bool,
    pub doc: &'static str,
}

const fn key(key: &'static str, kind: Kind, doc: &'static str) -> KeyDoc {
    KeyDoc { key, kind, optional: false, doc }
}

const fn opt(key: &'static str, kind: Kind, doc: &'static str) -> KeyDoc {
    KeyDoc { key, kind, optional: true, doc }
}

const VARIANTS: &[&str] = &["with_context", "without_context"];

pub const KEYS: &[KeyDoc] = &[
    opt("data.images_root", Kind::Path, "directory image file names resolve against"),
    key("data.background", Kind::Choice(&["participate", "exclude"]), "treatment of a `background` category"),
    opt("data.default_split", Kind::Str, "split for annotations without one"),
    key("data.crop_size", Kind::UInt, "person crop input side, pixels"),
    key("data.context_size", Kind::UInt, "context image input side, pixels"),
    key("data.pad_ratio", Kind::Float, "crop padding as a fraction of the longer box side"),
    key("data.mean", Kind::FloatTriple, "per-channel normalization mean"),
    key("data.std", Kind::FloatTriple, "per-channel normalization std"),
    key("model.backbone", Kind::Backbone, "backbone family of the crop branch"),
    opt("model.context_backbone", Kind::Backbone, "backbone family of the context branch (default: model.backbone)"),
    key("model.with_context", Kind::Bool, "build the context branch; false gives the crop-only ablation"),
    key("model.pretrained", Kind::Bool, "load pretrained backbone weights from $ARTGESTURE_WEIGHTS_DIR"),
    opt("model.feature_dim", Kind::UInt, "project pooled backbone features to this width"),
    key("model.hidden_dims", Kind::UIntList, "three hidden widths of the fusion head"),
    key("model.dropout", Kind::Float, "dropout after the first two hidden layers"),
    key("model.activation", Kind::Choice(&["relu", "gelu"]), "fusion head activation"),
    key("train.epochs", Kind::UInt, "maximum number of epochs"),
    key("train.batch_size", Kind::UInt, "training batch size"),
    key("train.optimizer", Kind::Choice(&["adamw", "sgd"]), "optimizer"),
    key("train.lr_backbone", Kind::Float, "learning rate of both backbones"),
    key("train.lr_head", Kind::Float, "learning rate of the fusion head"),
    key("train.weight_decay", Kind::Float, "decoupled weight decay (weights only)"),
    key("train.lr_schedule", Kind::Choice(&["constant", "cosine"]), "per-epoch learning-rate schedule"),
    key("train.class_weighting", Kind::Choice(&["none", "inverse_frequency", "effective_number"]), "loss weighting scheme"),
    key("train.effective_number_beta", Kind::Float, "beta of effective_number weighting"),
    key("train.label_smoothing", Kind::Float, "label smoothing in [0, 0.5)"),
    key("train.seed", Kind::UInt, "seed of a single run"),
    key("train.augment", Kind::Bool, "random flips and color jitter during training"),
    key("train.augmentation.hflip_prob", Kind::Float, "horizontal flip probability"),
    key("train.augmentation.brightness", Kind::Float, "brightness jitter strength"),
    key("train.augmentation.contrast", Kind::Float, "contrast jitter strength"),
    key("train.augmentation.saturation", Kind::Float, "saturation jitter strength"),
    key("train.early_stop_metric", Kind::Choice(&["val_macro_f1"]), "model selection metric"),
    key("train.averaging", Kind::Choice(&["macro", "weighted"]), "F1 averaging of the selection metric"),
    key("train.patience", Kind::UInt, "stop after this many epochs without improvement (0 disables)"),
    key("train.train_split", Kind::Str, "split trained on"),
    key("train.val_split", Kind::Str, "split used for model selection (falls back to the train split)"),
    key("train.eval_batch_size", Kind::UInt, "batch size of per-epoch validation"),
    key("train.seeds", Kind::UIntList, "one run per seed; empty runs train.seed only"),
    key("train.test_split", Kind::Str, "split evaluated after each run"),
    key("eval.split", Kind::Str, "split to evaluate"),
    opt("eval.variant", Kind::Choice(VARIANTS), "evaluation variant (default: the checkpoint's)"),
    key("eval.batch_size", Kind::UInt, "evaluation batch size"),
    key("infer.score_threshold", Kind::Float, "drop detections scoring below this"),
    key("infer.batch_size", Kind::UInt, "detections classified per forward pass"),
    opt("infer.adapter", Kind::Choice(&["null", "replay"]), "detector adapter (default: replay with detections, else null)"),
    opt("infer.category_id", Kind::Int, "keep only detections of this category"),
    opt("infer.variant", Kind::Choice(VARIANTS), "inference variant (default: the checkpoint's)"),
    opt("infer.format", Kind::Choice(&["json", "csv"]), "prediction file format (default: from extension)"),
];

pub fn key_doc(name: &str) -> Option<&'static KeyDoc> {
    KEYS.iter().find(|k| k.key == name)
}

fn unknown_key(name: &str) -> ConfigError {
    let suggestion = KEYS
        .iter()
        .map(|k| (strsim::levenshtein(name, k.key), k.key))
        .min()
        .filter(|(d, k)| *d <= 3.max(k.len() / 4))
        .map(|(_, k)| k.to_string());
    ConfigError::UnknownKey { key: name.to_string(), suggestion }
}

fn show(v: &Value) -> String {
    match v {
        Value::String(s) => format!("{s:?}"),
        other => other.to_string(),
    }
}

/// Type-check and normalize one value for `doc`.
fn check(doc: &KeyDoc, v: Value) -> Result<Value, ConfigError> {
    let fail = |v: &Value| ConfigError::TypeError { key: doc.key.into(), expected: doc.kind.describe(), found: show(v) };
    if v.is_null() {
        return if doc.optional { Ok(v) } else { Err(fail(&v)) };
    }
    let ok = match doc.kind {
        Kind::UInt => v.is_u64(),
        Kind::Int => v.is_i64() || v.is_u64(),
        Kind::Float => v.as_f64().is_some_and(f64::is_finite),
        Kind::Bool => v.is_boolean(),
        Kind::Str | Kind::Path => v.is_string(),
        Kind::Choice(choices) => {
            let s = v.as_str().map(str::to_ascii_lowercase).ok_or_else(|| fail(&v))?;
            if !choices.contains(&s.as_str()) {
                return Err(fail(&v));
            }
            return Ok(Value::String(s));
        }
        Kind::Backbone => {
            let s = v.as_str().ok_or_else(|| fail(&v))?;
            let family = BackboneFamily::from_str(s).map_err(|_| fail(&v))?;
            return Ok(Value::String(family.as_str().into()));
        }
        Kind::UIntList => v.as_array().is_some_and(|a| a.iter().all(Value::is_u64)),
        Kind::FloatTriple => v.as_array().is_some_and(|a| a.len() == 3 && a.iter().all(Value::is_number)),
    };
    if ok {
        Ok(v)
    } else {
        Err(fail(&v))
    }
}

/// Value of a `key=value` flag, typed by the key.
fn parse_flag(doc: &KeyDoc, raw: &str) -> Result<Value, ConfigError> {
    let raw = raw.trim();
    let fail = || ConfigError::TypeError { key: doc.key.into(), expected: doc.kind.describe(), found: format!("{raw:?}") };
    if doc.optional && matches!(raw.to_ascii_lowercase().as_str(), "none" | "null" | "") {
        return Ok(Value::Null);
    }
    let v = match doc.kind {
        Kind::UInt => Value::from(raw.parse::<u64>().map_err(|_| fail())?),
        Kind::Int => Value::from(raw.parse::<i64>().map_err(|_| fail())?),
        Kind::Float => serde_json::Number::from_f64(raw.parse::<f64>().map_err(|_| fail())?).map(Value::Number).ok_or_else(fail)?,
        Kind::Bool => match raw.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "on" => Value::Bool(true),
            "false" | "0" | "no" | "off" => Value::Bool(false),
            _ => return Err(fail()),
        },
        Kind::Str | Kind::Path | Kind::Choice(_) | Kind::Backbone => Value::String(raw.to_string()),
        Kind::UIntList | Kind::FloatTriple => {
            if raw.starts_with('[') {
                serde_json::from_str(raw).map_err(|_| fail())?
            } else if raw.is_empty() {
                Value::Array(vec![])
            } else {
                let items: Result<Vec<Value>, _> = raw
                    .split(',')
                    .map(|s| serde_json::from_str::<Value>(s.trim()).map_err(|_| fail()))
                    .collect();
                Value::Array(items?)
            }
        }
    };
    check(doc, v)
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Nested document → dotted keys (arrays are leaves).
pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_into("", v, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("keys never nest under a leaf");
            }
        }
    }
    Value::Object(root)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DocumentFormat {
    Toml,
    Json,
}

impl DocumentFormat {
    /// `.json` is JSON, anything else TOML.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => DocumentFormat::Json,
            _ => DocumentFormat::Toml,
        }
    }
}

/// A config document: nested tables, dotted keys, or a mix.
pub fn parse_document(text: &str, format: DocumentFormat, origin: &str) -> Result<Value, ConfigError> {
    let doc = |message: String| ConfigError::Document { path: origin.to_string(), message };
    let v: Value = match format {
        DocumentFormat::Json => serde_json::from_str(text).map_err(|e| doc(e.to_string()))?,
        DocumentFormat::Toml => {
            let t: toml::Table = toml::from_str(text).map_err(|e| doc(e.to_string()))?;
            serde_json::to_value(t).map_err(|e| doc(e.to_string()))?
        }
    };
    if !v.is_object() {
        return Err(doc("expected a table of config keys".into()));
    }
    Ok(v)
}

/// Split `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String), ConfigError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.to_string())),
        _ => Err(ConfigError::MalformedOverride(s.to_string())),
    }
}

impl ToolkitConfig {
    /// Every documented key with its value.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self, ConfigError> {
        let mut checked = ToolkitConfig::default().to_flat();
        for (k, v) in flat {
            let doc = key_doc(k).ok_or_else(|| unknown_key(k))?;
            checked.insert(k.clone(), check(doc, v.clone())?);
        }
        serde_json::from_value(unflatten(&checked)).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Value of one key.
    pub fn get(&self, key: &str) -> Result<Value, ConfigError> {
        self.to_flat().remove(key).ok_or_else(|| unknown_key(key))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.data.preprocess.validate().map_err(|e| invalid(&e))?;
        self.train.config.validate().map_err(|e| invalid(&e))?;
        self.model.head.validate().map_err(|e| invalid(&e))?;
        if self.model.feature_dim == Some(0) {
            return Err(ConfigError::Invalid("model.feature_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.model.head.dropout) {
            return Err(ConfigError::Invalid(format!("model.dropout {} outside [0, 1)", self.model.head.dropout)));
        }
        if !(0.0..=1.0).contains(&self.infer.score_threshold) {
            return Err(ConfigError::Invalid(format!("infer.score_threshold {} outside [0, 1]", self.infer.score_threshold)));
        }
        if self.eval.batch_size == 0 || self.infer.batch_size == 0 {
            return Err(ConfigError::Invalid("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Defaults, then `document`, then `overrides` (later overrides win).
pub fn resolve_document(document: Option<&Value>, overrides: &[(String, String)]) -> Result<ToolkitConfig, ConfigError> {
    let mut flat = BTreeMap::new();
    if let Some(doc) = document {
        for (k, v) in flatten(doc) {
            let kd = key_doc(&k).ok_or_else(|| unknown_key(&k))?;
            flat.insert(k, check(kd, v)?);
        }
    }
    for (k, raw) in overrides {
        let kd = key_doc(k).ok_or_else(|| unknown_key(k))?;
        flat.insert(k.clone(), parse_flag(kd, raw)?);
    }
    let cfg = ToolkitConfig::from_flat(&flat)?;
    cfg.validate()?;
    Ok(cfg)
}

/// [`resolve_document`] reading the document from `file`.
pub fn resolve_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<ToolkitConfig, ConfigError> {
    let doc = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError::Document { path: path.display().to_string(), message: e.to_string() })?;
            Some(parse_document(&text, DocumentFormat::for_path(path), &path.display().to_string())?)
        }
        None => None,
    };
    resolve_document(doc.as_ref(), overrides)
}

/// One line per key: name, type, default and description.
pub fn render_key_help() -> String {
    let defaults = ToolkitConfig::default().to_flat();
    KEYS.iter()
        .map(|k| {
            let default = defaults.get(k.key).map_or_else(String::new, |v| if v.is_null() { "none".into() } else { show(v) });
            format!("  {:<32} {} (default: {default})\n      {}", k.key, k.kind.describe(), k.doc)
        })
        .collect::<Vec<_>>()
        .join("\n")
}
