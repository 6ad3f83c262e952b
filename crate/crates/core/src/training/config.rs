use serde::{Deserialize, Serialize};

use super::{ClassWeighting, LrSchedule, OptimizerKind, TrainError};
use crate::data::AugmentConfig;
use crate::evaluation::Averaging;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMetric {
    #[default]
    ValMacroF1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    /// Learning rate of both backbones (and any projection layers).
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub class_weighting: ClassWeighting,
    /// Beta of the effective-number weighting.
    pub effective_number_beta: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub early_stop_metric: EarlyStopMetric,
    /// Averaging used for the validation score.
    pub averaging: Averaging,
    pub patience: usize,
    pub train_split: String,
    pub val_split: String,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            optimizer: OptimizerKind::AdamW,
            lr_backbone: 1e-4,
            lr_head: 1e-3,
            weight_decay: 1e-2,
            lr_schedule: LrSchedule::Cosine,
            class_weighting: ClassWeighting::InverseFrequency,
            effective_number_beta: 0.999,
            label_smoothing: 0.1,
            seed: 0,
            augment: true,
            augmentation: AugmentConfig::default(),
            early_stop_metric: EarlyStopMetric::ValMacroF1,
            averaging: Averaging::Macro,
            patience: 10,
            train_split: "train".into(),
            val_split: "val".into(),
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be > 0".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be > 0".into());
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 0.5)", self.label_smoothing));
        }
        for (name, lr) in [("lr_backbone", self.lr_backbone), ("lr_head", self.lr_head)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return bad(format!("{name} must be a finite non-negative number, got {lr}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.effective_number_beta) {
            return bad(format!("effective_number_beta {} outside [0, 1)", self.effective_number_beta));
        }
        if self.train_split.is_empty() {
            return bad("train_split is empty".into());
        }
        Ok(())
    }
}
