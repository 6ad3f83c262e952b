//! Confusion matrices, F1 scores, multi-seed aggregation and result tables.

mod aggregate;
mod metrics;
mod report;

use ndarray::{Array2, Axis, Ix2};
use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate_runs, MultiRunSummary, RunAggregate, RunRecord};
pub use metrics::{
    confusion_matrix, macro_f1, per_class_f1, per_class_precision, per_class_recall, weighted_f1, Averaging,
    ConfusionMatrix,
};
pub use report::{collect_rows, parse_report_json, render_report, ReportFormat};

use crate::data::{DataError, ExampleLoader, PersonInstance};
use crate::model::{ModelError, TwoStreamModel, Variant};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{preds} predictions for {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class id {id} outside [0, {num_classes})")]
    IdOutOfRange { id: usize, num_classes: usize },
    #[error("{0}")]
    EmptyInput(&'static str),
    #[error("{0}")]
    InvalidMatrix(String),
    #[error("invalid report: {0}")]
    InvalidReport(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Scores of one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub seed: Option<u64>,
    pub backbone: String,
    pub variant: Variant,
    pub split: String,
    pub labels: Vec<String>,
    pub n_samples: usize,
    pub confusion: ConfusionMatrix,
    pub support: Vec<u64>,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix, labels: Vec<String>) -> Self {
        Self {
            run_id: String::new(),
            seed: None,
            backbone: String::new(),
            variant: Variant::WithContext,
            split: String::new(),
            labels,
            n_samples: cm.total() as usize,
            support: cm.support(),
            per_class_precision: per_class_precision(&cm),
            per_class_recall: per_class_recall(&cm),
            per_class_f1: per_class_f1(&cm),
            macro_f1: macro_f1(&cm),
            weighted_f1: weighted_f1(&cm),
            accuracy: cm.accuracy(),
            confusion: cm,
        }
    }

    pub fn score(&self, averaging: Averaging) -> f64 {
        match averaging {
            Averaging::Macro => self.macro_f1,
            Averaging::Weighted => self.weighted_f1,
        }
    }
}

/// Name of a model's backbone pair as used in tables.
pub fn backbone_label(model: &TwoStreamModel) -> String {
    let cfg = model.config();
    match &cfg.context {
        Some(c) if c.family != cfg.crop.family => {
            format!("{} + {}", cfg.crop.family.display_name(), c.family.display_name())
        }
        _ => cfg.crop.family.display_name().to_string(),
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub batch_size: usize,
    pub run_id: String,
    pub seed: Option<u64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { batch_size: 32, run_id: String::new(), seed: None }
    }
}

/// Eval-mode logits `(N, C)` for the given instances, in order.
pub fn predict_instances(
    model: &TwoStreamModel,
    loader: &ExampleLoader,
    instances: &[&PersonInstance],
    variant: Variant,
    batch_size: usize,
) -> Result<Array2<f32>, EvalError> {
    let mut out = Array2::zeros((0, model.num_classes()));
    for chunk in instances.chunks(batch_size.max(1)) {
        let batch = loader.batch(chunk, None, 0)?;
        let context = match variant {
            Variant::WithContext => Some(&batch.context),
            Variant::WithoutContext => None,
        };
        let logits = model.predict_logits(&batch.crop, context, variant)?;
        let logits = logits.into_dimensionality::<Ix2>().expect("logits are 2-D");
        out.append(Axis(0), logits.view()).expect("matching width");
    }
    Ok(out)
}

/// Row-wise argmax; ties go to the lower class id.
pub fn argmax_rows(scores: &Array2<f32>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|r| r.iter().enumerate().fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0)
        .collect()
}

/// Deterministic evaluation over every instance of `split`.
pub fn evaluate_split(
    model: &TwoStreamModel,
    loader: &ExampleLoader,
    split: &str,
    variant: Variant,
    opts: &EvalOptions,
) -> Result<MetricsReport, EvalError> {
    let manifest = loader.manifest();
    let instances = manifest.split_instances(split)?;
    let logits = predict_instances(model, loader, &instances, variant, opts.batch_size)?;
    let preds = argmax_rows(&logits);
    let labels: Vec<usize> = instances.iter().map(|i| i.label_id).collect();
    let cm = confusion_matrix(&preds, &labels, model.num_classes())?;
    let mut report = MetricsReport::from_confusion(cm, model.labels().names().to_vec());
    report.run_id = opts.run_id.clone();
    report.seed = opts.seed;
    report.backbone = backbone_label(model);
    report.variant = variant;
    report.split = split.to_string();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::autograd::Graph;
    use crate::data::synthetic::{generate, SyntheticConfig};
    use crate::data::PreprocessConfig;
    use crate::model::{build_model, BackboneFamily, BackboneSpec, FusionHeadConfig, ModelConfig};

    fn setup() -> (tempfile::TempDir, ExampleLoader, TwoStreamModel) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig { per_class: 5, image_size: 24, box_size: 10, ..Default::default() };
        let manifest = generate(&cfg, dir.path()).unwrap();
        let mcfg = ModelConfig {
            crop: BackboneSpec::new(BackboneFamily::TinyTest, 16),
            context: Some(BackboneSpec::new(BackboneFamily::TinyTest, 16)),
            head: FusionHeadConfig { hidden_dims: vec![16, 16, 16], ..Default::default() },
            num_classes: manifest.num_classes(),
        };
        let model = build_model(&mcfg, manifest.labels.clone(), 0).unwrap();
        let pre = PreprocessConfig { crop_size: 16, context_size: 16, ..Default::default() };
        let loader = ExampleLoader::new(Arc::new(manifest), pre).unwrap();
        (dir, loader, model)
    }

    #[test]
    fn matches_per_sample_forward_and_oracle() {
        let (_dir, loader, model) = setup();
        let report = evaluate_split(&model, &loader, "train", Variant::WithContext, &EvalOptions { batch_size: 7, ..Default::default() }).unwrap();
        assert_eq!(report.n_samples, 30);
        assert_eq!(report, evaluate_split(&model, &loader, "train", Variant::WithContext, &EvalOptions { batch_size: 7, ..Default::default() }).unwrap());

        // One sample at a time through the graph, then F1 by direct counting.
        let instances = loader.manifest().split_instances("train").unwrap();
        let c = model.num_classes();
        let (mut tp, mut pred_n, mut true_n) = (vec![0f64; c], vec![0f64; c], vec![0f64; c]);
        for inst in &instances {
            let b = loader.batch(&[*inst], None, 0).unwrap();
            let g = Graph::inference();
            let logits = model.forward(&g, &g.constant(b.crop), Some(&g.constant(b.context)), Variant::WithContext).unwrap();
            let row: Vec<f32> = logits.value().iter().copied().collect();
            let mut p = 0;
            for k in 1..c {
                if row[k] > row[p] {
                    p = k;
                }
            }
            pred_n[p] += 1.0;
            true_n[inst.label_id] += 1.0;
            if p == inst.label_id {
                tp[p] += 1.0;
            }
        }
        let oracle: f64 = (0..c)
            .map(|k| if pred_n[k] + true_n[k] == 0.0 { 0.0 } else { 2.0 * tp[k] / (pred_n[k] + true_n[k]) })
            .sum::<f64>()
            / c as f64;
        assert!((report.macro_f1 - oracle).abs() < 1e-12, "{} vs {oracle}", report.macro_f1);
    }

    #[test]
    fn constant_predictor_on_single_class_split() {
        let (_dir, loader, mut model) = setup();
        // Zero the last layer and bias class 0 so every sample predicts 0.
        let last = model.head.layers.last_mut().unwrap();
        last.weight.value_mut().fill(0.0);
        let bias = last.bias.as_mut().unwrap();
        bias.value_mut().fill(0.0);
        bias.value_mut()[[0]] = 1.0;
        let manifest = loader.manifest();
        let class0: Vec<_> = manifest.split_instances("train").unwrap().into_iter().filter(|i| i.label_id == 0).collect();
        let logits = predict_instances(&model, &loader, &class0, Variant::WithContext, 4).unwrap();
        let preds = argmax_rows(&logits);
        let cm = confusion_matrix(&preds, &vec![0; class0.len()], model.num_classes()).unwrap();
        assert!((macro_f1(&cm) - 1.0 / model.num_classes() as f64).abs() < 1e-15);
    }

    #[test]
    fn without_context_differs_and_unknown_split_errors() {
        let (_dir, loader, model) = setup();
        let opts = EvalOptions::default();
        let a = evaluate_split(&model, &loader, "train", Variant::WithoutContext, &opts).unwrap();
        assert_eq!(a.variant, Variant::WithoutContext);
        assert_eq!(a.backbone, "TinyTest");
        assert!(matches!(
            evaluate_split(&model, &loader, "nope", Variant::WithContext, &opts),
            Err(EvalError::Data(DataError::UnknownSplit { .. }))
        ));
    }
}
