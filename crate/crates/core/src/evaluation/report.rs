use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::manifest::StyleTaxonomy;

/// A metric as a percentage with two decimals: 0.7182 → "71.82".
pub fn format_percent(value: f64) -> String {
    format!("{:.2}", value * 100.0)
}

fn cell(value: Option<f64>) -> String {
    value.map_or_else(|| "-".to_owned(), format_percent)
}

/// Plain-text table of per-class metrics, summary lines and the confusion matrix.
pub fn render_text(report: &EvalReport) -> String {
    let width = report.classes.iter().map(String::len).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>7}", "class", "AP", "PCP", "support");
    for (c, name) in report.classes.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7}  {:>7}  {:>7}",
            name,
            cell(report.average_precision[c]),
            cell(report.per_class_precision[c]),
            report.confusion.support[c]
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "MAP (mean AP)      {}", cell(report.map));
    let _ = writeln!(out, "mean PCP (argmax)  {}", cell(report.mean_per_class_precision));
    let _ = writeln!(out, "top-1 accuracy     {}", format_percent(report.accuracy));
    let _ = writeln!(out, "samples            {}", report.samples);
    let _ = writeln!(out);
    let _ = writeln!(out, "confusion matrix (rows: true class, %)");
    for (c, row) in report.confusion.rows.iter().enumerate() {
        let flag = if report.confusion.zero_support.contains(&c) {
            "  (no support)"
        } else {
            ""
        };
        let cells: Vec<String> = row.iter().map(|&v| format!("{:>6}", format_percent(v))).collect();
        let _ = writeln!(out, "{:<width$}  {}{flag}", report.classes[c], cells.join(" "));
    }
    out
}

/// Structured form of the report; parsing it back yields an equal report.
pub fn render_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("reports serialize")
}

/// A flat data series for a bar plot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarSeries {
    pub name: String,
    pub labels: Vec<String>,
    /// Percentages; `None` where the metric is undefined.
    pub values: Vec<Option<f64>>,
}

/// Per-class AP and PCP series, plus a trailing overall entry.
pub fn bar_series(report: &EvalReport) -> Vec<BarSeries> {
    let mut labels = report.classes.clone();
    labels.push("overall".to_owned());
    let pct = |v: &Option<f64>| v.map(|x| x * 100.0);
    let mut ap: Vec<Option<f64>> = report.average_precision.iter().map(pct).collect();
    ap.push(pct(&report.map));
    let mut pcp: Vec<Option<f64>> = report.per_class_precision.iter().map(pct).collect();
    pcp.push(pct(&report.mean_per_class_precision));
    vec![
        BarSeries {
            name: "average_precision".to_owned(),
            labels: labels.clone(),
            values: ap,
        },
        BarSeries {
            name: "per_class_precision".to_owned(),
            labels,
            values: pcp,
        },
    ]
}

/// Relative AP change of `candidate` over `baseline` in percent, per class and overall.
pub fn relative_improvement(baseline: &EvalReport, candidate: &EvalReport) -> BarSeries {
    let rel = |b: Option<f64>, c: Option<f64>| match (b, c) {
        (Some(b), Some(c)) if b > 0.0 => Some((c - b) / b * 100.0),
        _ => None,
    };
    let mut labels = candidate.classes.clone();
    labels.push("overall".to_owned());
    let mut values: Vec<Option<f64>> = baseline
        .average_precision
        .iter()
        .zip(&candidate.average_precision)
        .map(|(&b, &c)| rel(b, c))
        .collect();
    values.push(rel(baseline.map, candidate.map));
    BarSeries {
        name: "relative_ap_improvement".to_owned(),
        labels,
        values,
    }
}

/// Class names with probabilities, most probable first (ties keep class order).
pub fn ranked_classes(probabilities: &[f64], taxonomy: &StyleTaxonomy) -> Vec<(String, f64)> {
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]));
    order
        .into_iter()
        .map(|i| {
            let name = taxonomy.class_name(i).map_or_else(|| format!("class{i}"), str::to_owned);
            (name, probabilities[i])
        })
        .collect()
}

/// One `name<TAB>probability` line per class, probabilities at full precision.
pub fn render_ranked(ranked: &[(String, f64)]) -> String {
    let mut out = String::new();
    for (name, p) in ranked {
        let _ = writeln!(out, "{name}\t{p}");
    }
    out
}
