//! CSV tables and SVG bar charts built from quantification reports.
//!
//! CSV is the canonical output; every table is sorted deterministically
//! so reruns are byte-identical.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::quantify::{rank, BiasScore, QuantifyReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScopeFilter {
    ContextFree,
    ContextAware,
    #[default]
    All,
}

impl FromStr for ScopeFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context-free" => Ok(ScopeFilter::ContextFree),
            "context-aware" => Ok(ScopeFilter::ContextAware),
            "all" => Ok(ScopeFilter::All),
            _ => Err(Error::Invalid(format!(
                "scope must be context-free, context-aware or all, got {s:?}"
            ))),
        }
    }
}

/// Ranked score rows: context-free first, then context-aware.
pub fn score_rows(report: &QuantifyReport, filter: ScopeFilter) -> Vec<BiasScore> {
    let mut rows = Vec::new();
    if filter != ScopeFilter::ContextAware {
        rows.extend(report.context_free_scores());
    }
    if filter != ScopeFilter::ContextFree {
        rows.extend(report.context_aware_scores());
    }
    rows
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    bias: &'a str,
    scope: String,
    severity: f64,
    majority_class: &'a str,
    support: usize,
    class_count: usize,
}

fn finish(writer: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Invalid(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Invalid(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

pub fn scores_csv(rows: &[BiasScore]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record([
            "bias",
            "scope",
            "severity",
            "majority_class",
            "support",
            "class_count",
        ])
        .map_err(csv_err)?;
    }
    for s in rows {
        w.serialize(ScoreRow {
            bias: &s.bias,
            scope: s.scope.to_string(),
            severity: s.severity,
            majority_class: &s.majority_class,
            support: s.support,
            class_count: s.class_count,
        })
        .map_err(csv_err)?;
    }
    finish(w)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextRow {
    pub bias: String,
    pub context_free: Option<f64>,
    pub context_aware: Option<f64>,
}

/// Context-free severity next to the mean context-aware severity of each
/// bias, ordered by context-free severity.
pub fn context_comparison(report: &QuantifyReport) -> Vec<ContextRow> {
    let mut rows: Vec<ContextRow> = report
        .biases
        .iter()
        .map(|b| ContextRow {
            bias: b.bias.clone(),
            context_free: b
                .context_free
                .as_ref()
                .and_then(|d| d.score.as_ref())
                .map(|s| s.severity),
            context_aware: b.context_aware_mean,
        })
        .collect();
    rows.sort_by(|a, b| {
        let key = |r: &ContextRow| r.context_free.unwrap_or(-1.0);
        key(b).total_cmp(&key(a)).then_with(|| a.bias.cmp(&b.bias))
    });
    rows
}

pub fn context_comparison_csv(rows: &[ContextRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["bias", "context_free", "context_aware"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([r.bias.clone(), opt(r.context_free), opt(r.context_aware)])
            .map_err(csv_err)?;
    }
    finish(w)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Severity of the same biases under several generators.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelComparison {
    pub models: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

/// Side-by-side severities. Context-aware uses each bias's mean
/// per-caption severity; rows follow the first model's ranking, with biases
/// it lacks appended by name.
pub fn model_comparison(
    reports: &[(String, QuantifyReport)],
    filter: ScopeFilter,
) -> Result<ModelComparison> {
    if reports.len() < 2 {
        return Err(Error::Invalid(
            "comparison needs at least two reports".into(),
        ));
    }
    let value = |r: &QuantifyReport, bias: &str| -> Option<f64> {
        let b = r.bias(bias)?;
        match filter {
            ScopeFilter::ContextAware => b.context_aware_mean,
            _ => b.context_free.as_ref()?.score.as_ref().map(|s| s.severity),
        }
    };
    let mut names: Vec<&str> = reports
        .iter()
        .flat_map(|(_, r)| r.biases.iter().map(|b| b.bias.as_str()))
        .collect();
    names.sort_unstable();
    names.dedup();
    let first = &reports[0].1;
    names.sort_by(|a, b| {
        let key = |n: &str| value(first, n).unwrap_or(-1.0);
        key(b).total_cmp(&key(a)).then_with(|| a.cmp(b))
    });
    Ok(ModelComparison {
        models: reports.iter().map(|(n, _)| n.clone()).collect(),
        rows: names
            .into_iter()
            .map(|n| {
                (
                    n.to_string(),
                    reports.iter().map(|(_, r)| value(r, n)).collect(),
                )
            })
            .collect(),
    })
}

pub fn model_comparison_csv(cmp: &ModelComparison) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("bias").chain(cmp.models.iter().map(String::as_str)))
        .map_err(csv_err)?;
    for (bias, values) in &cmp.rows {
        w.write_record(std::iter::once(bias.clone()).chain(values.iter().map(|v| opt(*v))))
            .map_err(csv_err)?;
    }
    finish(w)
}

const PALETTE: [&str; 6] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Horizontal grouped bar chart of values in [0, 1]; one group per row,
/// one bar per series. Missing values are left blank.
pub fn bar_chart_svg(
    title: &str,
    series: &[String],
    rows: &[(String, Vec<Option<f64>>)],
) -> String {
    const LABEL_W: f64 = 220.0;
    const PLOT_W: f64 = 400.0;
    const BAR_H: f64 = 12.0;
    const GAP: f64 = 8.0;
    const TOP: f64 = 40.0;

    let n = series.len().max(1);
    let group_h = BAR_H * n as f64 + GAP;
    let legend_h = if series.len() > 1 {
        18.0 * series.len() as f64
    } else {
        0.0
    };
    let height = TOP + group_h * rows.len() as f64 + 30.0 + legend_h;
    let width = LABEL_W + PLOT_W + 60.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="10" y="20" font-size="14">{}</text>"#,
        escape(title)
    );
    for (gi, (label, values)) in rows.iter().enumerate() {
        let y0 = TOP + gi as f64 * group_h;
        let mid = y0 + BAR_H * n as f64 / 2.0 + 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{mid}" text-anchor="end">{}</text>"#,
            LABEL_W - 6.0,
            escape(label)
        );
        for (si, v) in values.iter().enumerate() {
            let Some(v) = v else { continue };
            let y = y0 + si as f64 * BAR_H;
            let w = (v.clamp(0.0, 1.0) * PLOT_W * 100.0).round() / 100.0;
            let _ = writeln!(
                svg,
                r#"<rect x="{LABEL_W}" y="{y}" width="{w}" height="{}" fill="{}"/>"#,
                BAR_H - 1.0,
                PALETTE[si % PALETTE.len()]
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}">{v:.2}</text>"#,
                LABEL_W + w + 4.0,
                y + BAR_H - 2.0
            );
        }
    }
    let axis_y = TOP + group_h * rows.len() as f64;
    let _ = writeln!(
        svg,
        r##"<line x1="{LABEL_W}" y1="{axis_y}" x2="{}" y2="{axis_y}" stroke="#333"/>"##,
        LABEL_W + PLOT_W
    );
    for tick in 0..=4 {
        let x = LABEL_W + PLOT_W * tick as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" text-anchor="middle">{:.2}</text>"#,
            axis_y + 14.0,
            tick as f64 / 4.0
        );
    }
    if series.len() > 1 {
        for (si, name) in series.iter().enumerate() {
            let y = axis_y + 30.0 + si as f64 * 18.0;
            let _ = writeln!(
                svg,
                r#"<rect x="{LABEL_W}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{y}">{}</text>"#,
                y - 9.0,
                PALETTE[si % PALETTE.len()],
                LABEL_W + 14.0,
                escape(name)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Chart of ranked scores, one bar per row.
pub fn scores_svg(title: &str, scores: &[BiasScore]) -> String {
    let rows: Vec<(String, Vec<Option<f64>>)> = rank(scores.to_vec())
        .into_iter()
        .map(|s| {
            (
                format!("{} ({})", s.bias, s.majority_class),
                vec![Some(s.severity)],
            )
        })
        .collect();
    bar_chart_svg(title, &["severity".to_string()], &rows)
}
