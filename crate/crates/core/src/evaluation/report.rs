use serde_json::Value;

use super::{EvalError, MetricsReport, MultiRunSummary};
use crate::model::Variant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Markdown,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format {other:?} (expected markdown or json)")),
        }
    }
}

pub fn render_report(rows: &[MultiRunSummary], format: ReportFormat) -> Result<String, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyInput("report needs at least one row"));
    }
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(rows).expect("rows serialize") + "\n",
        ReportFormat::Markdown => {
            let mut out = String::from("| Backbone | Variant | Test-F1 |\n|---|---|---|\n");
            for row in rows {
                out += &format!("| {} | {} | {} |\n", row.backbone, row.variant.label(), row.cell());
            }
            out
        }
    })
}

/// Inverse of the JSON rendering.
pub fn parse_report_json(text: &str) -> Result<Vec<MultiRunSummary>, EvalError> {
    serde_json::from_str(text).map_err(|e| EvalError::InvalidReport(e.to_string()))
}

/// Build table rows from a mix of documents: single-run metric reports
/// (grouped by backbone and variant) and already aggregated rows, or lists
/// of either. Rows keep first-seen backbone order, without-context first.
pub fn collect_rows(documents: &[Value]) -> Result<Vec<MultiRunSummary>, EvalError> {
    let mut runs: Vec<MetricsReport> = Vec::new();
    let mut rows: Vec<MultiRunSummary> = Vec::new();
    let mut stack: Vec<&Value> = documents.iter().rev().collect();
    while let Some(doc) = stack.pop() {
        match doc {
            Value::Array(items) => stack.extend(items.iter().rev()),
            Value::Object(map) if map.contains_key("mean_f1") => rows.push(
                serde_json::from_value(doc.clone()).map_err(|e| EvalError::InvalidReport(format!("summary row: {e}")))?,
            ),
            Value::Object(map) if map.contains_key("macro_f1") => runs.push(
                serde_json::from_value(doc.clone()).map_err(|e| EvalError::InvalidReport(format!("metrics report: {e}")))?,
            ),
            other => {
                let kind = if other.is_object() { "object without mean_f1 or macro_f1" } else { "non-object value" };
                return Err(EvalError::InvalidReport(format!("unrecognized document: {kind}")));
            }
        }
    }
    let mut groups: Vec<(String, Variant, Vec<MetricsReport>)> = Vec::new();
    for run in runs {
        match groups.iter_mut().find(|(b, v, _)| *b == run.backbone && *v == run.variant) {
            Some((_, _, list)) => list.push(run),
            None => groups.push((run.backbone.clone(), run.variant, vec![run])),
        }
    }
    for (backbone, variant, list) in groups {
        rows.push(MultiRunSummary::from_reports(&backbone, variant, &list)?);
    }
    if rows.is_empty() {
        return Err(EvalError::EmptyInput("no report rows found"));
    }
    let mut order: Vec<String> = Vec::new();
    for r in &rows {
        if !order.contains(&r.backbone) {
            order.push(r.backbone.clone());
        }
    }
    let variant_rank = |v: Variant| if v == Variant::WithoutContext { 0 } else { 1 };
    rows.sort_by_key(|r| (order.iter().position(|b| *b == r.backbone), variant_rank(r.variant)));
    Ok(rows)
}
