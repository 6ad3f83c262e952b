use serde::{Deserialize, Serialize};

use super::{ConfusionMatrix, EvalError, MetricsReport};
use crate::model::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single run.
    pub std: f64,
    pub n: usize,
    pub single_run: bool,
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunAggregate, EvalError> {
    let n = values.len();
    if n == 0 {
        return Err(EvalError::EmptyInput("aggregate_runs needs at least one value"));
    }
    // Shifted by the first value so constant inputs give exactly zero spread.
    let pivot = values[0];
    let mean = pivot + values.iter().map(|v| v - pivot).sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(RunAggregate { mean, std: 0.0, n, single_run: true });
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok(RunAggregate { mean, std: (ss / (n - 1) as f64).sqrt(), n, single_run: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: Option<u64>,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: ConfusionMatrix,
}

/// One table row: mean and std of test F1 over runs, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiRunSummary {
    pub backbone: String,
    pub variant: Variant,
    pub n_runs: usize,
    pub mean_f1: f64,
    pub std_f1: f64,
    #[serde(default)]
    pub single_run: bool,
    #[serde(default)]
    pub per_run: Vec<RunRecord>,
}

impl MultiRunSummary {
    /// A row from already-aggregated numbers (percent).
    pub fn from_stats(backbone: &str, variant: Variant, mean_f1: f64, std_f1: f64, n_runs: usize) -> Self {
        Self {
            backbone: backbone.to_string(),
            variant,
            n_runs,
            mean_f1,
            std_f1,
            single_run: n_runs == 1,
            per_run: vec![],
        }
    }

    /// Aggregate the macro F1 of several runs.
    pub fn from_reports(backbone: &str, variant: Variant, reports: &[MetricsReport]) -> Result<Self, EvalError> {
        let scores: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
        let agg = aggregate_runs(&scores)?;
        Ok(Self {
            backbone: backbone.to_string(),
            variant,
            n_runs: agg.n,
            mean_f1: 100.0 * agg.mean,
            std_f1: 100.0 * agg.std,
            single_run: agg.single_run,
            per_run: reports
                .iter()
                .map(|r| RunRecord {
                    seed: r.seed,
                    macro_f1: r.macro_f1,
                    per_class_f1: r.per_class_f1.clone(),
                    confusion: r.confusion.clone(),
                })
                .collect(),
        })
    }

    /// `"mean ± std"` with one decimal, flagged when there was one run.
    pub fn cell(&self) -> String {
        let cell = format!("{:.1} ± {:.1}", self.mean_f1, self.std_f1);
        if self.single_run || self.n_runs == 1 {
            format!("{cell} (single run)")
        } else {
            cell
        }
    }
}
