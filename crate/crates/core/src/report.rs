//! Group-level aggregation of bin profiles, annotator agreement, and
//! rendering to markdown, CSV, JSON and SVG line charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SummaryRecord;
use crate::positional::{sensitivity_of_means, BinProfile, DEFAULT_BIN_COUNT};
use crate::scorers::LabelRecord;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("mixed bin counts: expected {expected}, found {found}")]
    MixedBinCounts { expected: usize, found: usize },
    #[error("label lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no labels to compare")]
    Empty,
    #[error("annotator {0} has no labels")]
    UnknownAnnotator(String),
    #[error("need exactly two annotators, found {0:?}")]
    AnnotatorCount(Vec<String>),
}

/// Grouping of summaries in an aggregate table.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub model: String,
    pub dataset: String,
    pub context: String,
    pub regime: String,
    pub decoding: String,
}

/// Context bucket label such as "4K": tokens rounded to the nearest 1024,
/// at least "1K" for any non-empty context.
pub fn context_bucket(tokens: u64) -> String {
    let k = (tokens + 512) / 1024;
    format!("{}K", if tokens > 0 { k.max(1) } else { 0 })
}

impl GroupKey {
    pub fn for_summary(summary: &SummaryRecord) -> Self {
        let meta = |k: &str| summary.meta.get(k).cloned().unwrap_or_else(|| "-".to_owned());
        let context = match summary.meta.get("context") {
            Some(c) => c.clone(),
            None => summary
                .meta
                .get("context_tokens")
                .and_then(|t| t.parse().ok())
                .map_or_else(|| "-".to_owned(), context_bucket),
        };
        GroupKey {
            model: meta("model"),
            dataset: meta("dataset"),
            context,
            regime: summary.regime.as_str().to_owned(),
            decoding: summary.decoding.label(),
        }
    }

    pub fn label(&self) -> String {
        [&self.model, &self.dataset, &self.context, &self.regime, &self.decoding]
            .map(String::as_str)
            .join("/")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Bin mean over all facts of the group that fall in the bin.
    #[default]
    FactPooled,
    /// Unweighted mean of per-summary bin means.
    SummaryMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub key: GroupKey,
    /// Summaries in the group.
    pub n: usize,
    pub means: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    /// Recomputed from the group means.
    pub sensitivity: Option<f64>,
    /// Mean of the defined per-summary sensitivities.
    pub mean_summary_sensitivity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub bin_count: usize,
    pub pooling: Pooling,
    pub rows: Vec<AggregateRow>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn pool_bin(cells: &[(f64, usize)], pooling: Pooling) -> Option<f64> {
    match (cells, pooling) {
        ([], _) => None,
        ([(m, _)], _) => Some(*m),
        (_, Pooling::FactPooled) => {
            let total: usize = cells.iter().map(|(_, c)| c).sum();
            Some(cells.iter().map(|(m, c)| m * *c as f64).sum::<f64>() / total as f64)
        }
        (_, Pooling::SummaryMean) => mean(&cells.iter().map(|(m, _)| *m).collect::<Vec<_>>()),
    }
}

/// Groups per-summary profiles and pools them bin by bin. Rows are sorted by key.
pub fn aggregate(profiles: &[(GroupKey, BinProfile)], pooling: Pooling) -> Result<AggregateTable, ReportError> {
    let bin_count = profiles.first().map_or(DEFAULT_BIN_COUNT, |(_, p)| p.bin_count);
    let mut groups: BTreeMap<&GroupKey, Vec<&BinProfile>> = BTreeMap::new();
    for (key, profile) in profiles {
        if profile.bin_count != bin_count {
            return Err(ReportError::MixedBinCounts {
                expected: bin_count,
                found: profile.bin_count,
            });
        }
        groups.entry(key).or_default().push(profile);
    }
    let rows = groups
        .into_iter()
        .map(|(key, members)| {
            let means: Vec<Option<f64>> = (0..bin_count)
                .map(|k| {
                    let cells: Vec<(f64, usize)> = members
                        .iter()
                        .filter_map(|p| p.means[k].map(|m| (m, p.counts[k])))
                        .collect();
                    pool_bin(&cells, pooling)
                })
                .collect();
            let counts = (0..bin_count).map(|k| members.iter().map(|p| p.counts[k]).sum()).collect();
            let per_summary: Vec<f64> = members.iter().filter_map(|p| sensitivity_of_means(&p.means)).collect();
            AggregateRow {
                key: key.clone(),
                n: members.len(),
                sensitivity: sensitivity_of_means(&means),
                mean_summary_sensitivity: mean(&per_summary),
                means,
                counts,
            }
        })
        .collect();
    Ok(AggregateTable {
        bin_count,
        pooling,
        rows,
    })
}

/// Percentage of positions where the two label lists agree.
pub fn raw_agreement(labels_a: &[bool], labels_b: &[bool]) -> Result<f64, ReportError> {
    if labels_a.len() != labels_b.len() {
        return Err(ReportError::LengthMismatch(labels_a.len(), labels_b.len()));
    }
    if labels_a.is_empty() {
        return Err(ReportError::Empty);
    }
    let matches = labels_a.iter().zip(labels_b).filter(|(a, b)| a == b).count();
    Ok(100.0 * matches as f64 / labels_a.len() as f64)
}

/// `value` rounded half away from zero to `decimals` places.
pub fn round_to(value: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (value * scale).round() / scale
}

/// Aligns two annotators' labels on (summary, sentence, fact). Facts
/// labelled by only one annotator are skipped. With `None`, the file must
/// contain exactly two annotators, taken in sorted order.
pub fn paired_labels(
    records: &[LabelRecord],
    annotators: Option<(&str, &str)>,
) -> Result<(Vec<bool>, Vec<bool>), ReportError> {
    let mut by_annotator: BTreeMap<&str, BTreeMap<(&str, usize, usize), bool>> = BTreeMap::new();
    for r in records {
        by_annotator
            .entry(r.annotator.as_str())
            .or_default()
            .insert((r.summary_id.as_str(), r.sentence_index, r.fact_index), r.label);
    }
    let (a, b) = match annotators {
        Some(pair) => pair,
        None => {
            let names: Vec<&str> = by_annotator.keys().copied().collect();
            match names.as_slice() {
                [a, b] => (*a, *b),
                _ => return Err(ReportError::AnnotatorCount(names.iter().map(|s| s.to_string()).collect())),
            }
        }
    };
    let la = by_annotator.get(a).ok_or_else(|| ReportError::UnknownAnnotator(a.to_owned()))?;
    let lb = by_annotator.get(b).ok_or_else(|| ReportError::UnknownAnnotator(b.to_owned()))?;
    Ok(la
        .iter()
        .filter_map(|(k, va)| lb.get(k).map(|vb| (*va, *vb)))
        .unzip())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Markdown,
    Csv,
    Json,
    SvgLines,
}

pub fn render(table: &AggregateTable, format: Format) -> Vec<u8> {
    match format {
        Format::Markdown => render_markdown(table),
        Format::Csv => render_csv(table),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(table).expect("table serializes");
            s.push('\n');
            s
        }
        Format::SvgLines => render_svg(table),
    }
    .into_bytes()
}

fn fmt_sensitivity(s: Option<f64>) -> String {
    s.map_or_else(|| "n/a".to_owned(), |v| format!("{v:.2}"))
}

fn md_escape(s: &str) -> String {
    s.replace('|', "\\|")
}

fn render_markdown(table: &AggregateTable) -> String {
    let k = table.bin_count;
    let mut out = String::from("| Model | Dataset | Context | Regime | Decoding | n |");
    for i in 1..=k {
        let _ = write!(out, " Bin {i} |");
    }
    out.push_str(" Sensitivity |\n|---|---|---|---|---|---:|");
    out.push_str(&"---:|".repeat(k + 1));
    out.push('\n');
    for row in &table.rows {
        let key = &row.key;
        for cell in [&key.model, &key.dataset, &key.context, &key.regime, &key.decoding] {
            let _ = write!(out, "| {} ", md_escape(cell));
        }
        let _ = write!(out, "| {} |", row.n);
        let shown: Vec<Option<String>> = row.means.iter().map(|m| m.map(|v| format!("{v:.2}"))).collect();
        let numeric = |s: &String| s.parse::<f64>().expect("formatted number");
        let values: Vec<f64> = shown.iter().flatten().map(numeric).collect();
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        for cell in &shown {
            let text = match cell {
                None => "-".to_owned(),
                Some(s) => {
                    let v = numeric(s);
                    let mut t = s.clone();
                    if v == min {
                        t = format!("<u>{t}</u>");
                    }
                    if v == max {
                        t = format!("**{t}**");
                    }
                    t
                }
            };
            let _ = write!(out, " {text} |");
        }
        let _ = writeln!(out, " {} |", fmt_sensitivity(row.sensitivity));
    }
    let pooling = match table.pooling {
        Pooling::FactPooled => "fact_pooled",
        Pooling::SummaryMean => "summary_mean",
    };
    let _ = write!(out, "\nPooling: {pooling}\n");
    out
}

fn csv_row(cells: &[String]) -> String {
    let mut line = cells
        .iter()
        .map(|c| crate::positional::csv_field(c))
        .collect::<Vec<_>>()
        .join(",");
    line.push('\n');
    line
}

fn render_csv(table: &AggregateTable) -> String {
    let k = table.bin_count;
    let mut header: Vec<String> = ["model", "dataset", "context", "regime", "decoding", "n"]
        .map(str::to_owned)
        .to_vec();
    header.extend((1..=k).map(|i| format!("bin_{i}")));
    header.extend((1..=k).map(|i| format!("count_{i}")));
    header.push("sensitivity".to_owned());
    let mut out = csv_row(&header);
    for row in &table.rows {
        let key = &row.key;
        let mut cells = vec![
            key.model.clone(),
            key.dataset.clone(),
            key.context.clone(),
            key.regime.clone(),
            key.decoding.clone(),
            row.n.to_string(),
        ];
        cells.extend(row.means.iter().map(|m| m.map(|v| format!("{v:.4}")).unwrap_or_default()));
        cells.extend(row.counts.iter().map(usize::to_string));
        cells.push(row.sensitivity.map(|v| format!("{v:.2}")).unwrap_or_default());
        out.push_str(&csv_row(&cells));
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn render_svg(table: &AggregateTable) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 20.0;
    const BOTTOM: f64 = 50.0;
    let k = table.bin_count.max(2);
    let values: Vec<f64> = table.rows.iter().flat_map(|r| r.means.iter().flatten().copied()).collect();
    let (mut lo, mut hi) = match values.is_empty() {
        true => (0.0, 1.0),
        false => (
            (values.iter().copied().fold(f64::INFINITY, f64::min) * 10.0).floor() / 10.0,
            (values.iter().copied().fold(f64::NEG_INFINITY, f64::max) * 10.0).ceil() / 10.0,
        ),
    };
    if hi - lo < 0.1 {
        lo -= 0.05;
        hi += 0.05;
    }
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let x = |i: usize| LEFT + plot_w * i as f64 / (k - 1) as f64;
    let y = |v: f64| TOP + plot_h * (hi - v) / (hi - lo);
    let legend_h = 16.0 * table.rows.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" viewBox="0 0 {W} {}" font-family="sans-serif" font-size="11">"#,
        H + legend_h,
        H + legend_h
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r##"<path d="M{LEFT},{TOP} L{LEFT},{:.1} L{:.1},{:.1}" fill="none" stroke="#333"/>"##,
        TOP + plot_h,
        W - RIGHT,
        TOP + plot_h
    );
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, LEFT - 6.0, y(v) + 4.0);
    }
    for i in 0..k {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Bin {}</text>"#,
            x(i),
            TOP + plot_h + 18.0,
            i + 1
        );
    }
    for (n, row) in table.rows.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (i, m) in row.means.iter().enumerate() {
            match m {
                Some(v) => {
                    let _ = write!(d, "{}{:.1},{:.1} ", if pen_down { "L" } else { "M" }, x(i), y(*v));
                    pen_down = true;
                }
                None => pen_down = false,
            }
        }
        let data: Vec<String> = row
            .means
            .iter()
            .map(|m| m.map_or_else(|| "null".to_owned(), |v| format!("{v:.4}")))
            .collect();
        let label = xml_escape(&row.key.label());
        let _ = writeln!(
            out,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2" data-group="{label}" data-means="{}"/>"#,
            d.trim_end(),
            data.join(",")
        );
        for (i, m) in row.means.iter().enumerate() {
            if let Some(v) = m {
                let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, x(i), y(*v));
            }
        }
        let ly = H + 16.0 * n as f64;
        let _ = writeln!(
            out,
            r#"<text x="{LEFT}" y="{ly:.1}" fill="{color}">{label} (sensitivity {})</text>"#,
            fmt_sensitivity(row.sensitivity)
        );
    }
    out.push_str("</svg>\n");
    out
}
