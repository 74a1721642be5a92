//! Positional binning of fact scores and the sensitivity metric.
//!
//! A summary is cut into `K` equal-width bins along a positional coordinate
//! (word offset by default). `f_k` is the mean score of the facts in bin
//! `k`, and sensitivity is `100 * (mean(f_1..f_{K-1}) - f_K)`: positive
//! values mean the final bin is less faithful than the rest.
//!
//! Interval semantics differ by mode. `FixedDomain` splits `[0, W]` into
//! half-open bins `[e_{k-1}, e_k)` with the last bin closed on the right.
//! `ObservedRange` reproduces the classic equal-width cut: bins span
//! `[min, max]` of the observed positions, intervals are `(e_{k-1}, e_k]`,
//! and the lowest edge is pushed down by 0.1% of the range so the minimum
//! is included. Fully open intervals cannot partition the line, so neither
//! mode uses them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::AtomicFact;

pub const DEFAULT_BIN_COUNT: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum BinError {
    #[error("bin_count must be >= 2, got {0}")]
    TooFewBins(usize),
    #[error("positional domain must be >= 1, got {0}")]
    EmptyDomain(f64),
    #[error("position {position} outside [0, {domain}]")]
    PositionOutOfRange { position: f64, domain: f64 },
    #[error("degenerate position range")]
    DegenerateRange,
    #[error("{scores} scores for {assigned} bin assignments")]
    LengthMismatch { scores: usize, assigned: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinMode {
    #[default]
    FixedDomain,
    ObservedRange,
}

/// Positional coordinate assigned to each fact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinate {
    /// Midpoint word offset of the parent sentence, over `[0, word_count]`.
    #[default]
    Words,
    /// Ordinal of the fact among the binned facts (`i + 0.5`), over `[0, N]`.
    Facts,
    /// Ordinal of the parent sentence (`i + 0.5`), over `[0, S]`.
    Sentences,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinAssignment {
    pub bin_count: usize,
    pub mode: BinMode,
    pub edges: Vec<f64>,
    /// 0-based bin index per input position.
    pub bins: Vec<usize>,
}

fn fixed_edges(domain: f64, bin_count: usize) -> Vec<f64> {
    let mut edges: Vec<f64> = (0..=bin_count)
        .map(|k| k as f64 * domain / bin_count as f64)
        .collect();
    edges[bin_count] = domain;
    edges
}

/// Equal-width edges over `[min, max]`, lowest edge lowered by 0.1% of the range.
fn observed_edges(min: f64, max: f64, bin_count: usize) -> Vec<f64> {
    let step = (max - min) / bin_count as f64;
    let mut edges: Vec<f64> = (0..=bin_count).map(|k| min + k as f64 * step).collect();
    edges[bin_count] = max;
    edges[0] -= (max - min) * 0.001;
    edges
}

/// Assigns each position to a bin. `domain` is the summary length in the
/// chosen coordinate and is only used by `FixedDomain`.
pub fn assign_bins(positions: &[f64], domain: f64, bin_count: usize, mode: BinMode) -> Result<BinAssignment, BinError> {
    if bin_count < 2 {
        return Err(BinError::TooFewBins(bin_count));
    }
    let (edges, bins) = match mode {
        BinMode::FixedDomain => {
            if !(domain >= 1.0) {
                return Err(BinError::EmptyDomain(domain));
            }
            let edges = fixed_edges(domain, bin_count);
            let bins = positions
                .iter()
                .map(|&p| {
                    if !(0.0..=domain).contains(&p) {
                        return Err(BinError::PositionOutOfRange { position: p, domain });
                    }
                    Ok((edges.partition_point(|&e| e <= p) - 1).min(bin_count - 1))
                })
                .collect::<Result<Vec<_>, _>>()?;
            (edges, bins)
        }
        BinMode::ObservedRange => {
            if positions.iter().any(|p| !p.is_finite()) {
                let bad = positions.iter().find(|p| !p.is_finite()).copied().unwrap_or(f64::NAN);
                return Err(BinError::PositionOutOfRange {
                    position: bad,
                    domain,
                });
            }
            let min = positions.iter().copied().fold(f64::INFINITY, f64::min);
            let max = positions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if positions.is_empty() || min == max {
                return Err(BinError::DegenerateRange);
            }
            let edges = observed_edges(min, max, bin_count);
            let bins = positions
                .iter()
                .map(|&p| (edges.partition_point(|&e| e < p) - 1).min(bin_count - 1))
                .collect();
            (edges, bins)
        }
    };
    Ok(BinAssignment {
        bin_count,
        mode,
        edges,
        bins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinProfile {
    pub bin_count: usize,
    pub edges: Vec<f64>,
    /// `f_k`; `None` for empty bins.
    pub means: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl BinProfile {
    /// A profile built directly from bin means, one fact per bin.
    pub fn from_means(means: &[f64]) -> Self {
        BinProfile {
            bin_count: means.len(),
            edges: (0..=means.len()).map(|k| k as f64).collect(),
            means: means.iter().copied().map(Some).collect(),
            counts: vec![1; means.len()],
        }
    }

    pub fn total_count(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Mean score per bin.
pub fn bin_profile(scores: &[f64], assignment: &BinAssignment) -> Result<BinProfile, BinError> {
    if scores.len() != assignment.bins.len() {
        return Err(BinError::LengthMismatch {
            scores: scores.len(),
            assigned: assignment.bins.len(),
        });
    }
    let k = assignment.bin_count;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&s, &b) in scores.iter().zip(&assignment.bins) {
        sums[b] += s;
        counts[b] += 1;
    }
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    Ok(BinProfile {
        bin_count: k,
        edges: assignment.edges.clone(),
        means,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    /// Percentage points; `None` when any bin is empty.
    pub sensitivity: Option<f64>,
    pub profile: BinProfile,
    pub defined: bool,
    /// Computed with a bin count other than five.
    pub extension: bool,
}

/// `100 * (mean of bins 1..K-1 - bin K)`. Undefined when any bin is empty.
pub fn sensitivity(profile: &BinProfile) -> SensitivityReport {
    let value = sensitivity_of_means(&profile.means);
    SensitivityReport {
        sensitivity: value,
        profile: profile.clone(),
        defined: value.is_some(),
        extension: profile.bin_count != DEFAULT_BIN_COUNT,
    }
}

pub fn sensitivity_of_means(means: &[Option<f64>]) -> Option<f64> {
    if means.len() < 2 {
        return None;
    }
    let values: Option<Vec<f64>> = means.iter().copied().collect();
    let values = values?;
    let (last, head) = values.split_last()?;
    let head_mean = head.iter().sum::<f64>() / head.len() as f64;
    Some(100.0 * (head_mean - last))
}

/// Position of each fact under `coordinate`, and the matching domain.
/// `facts` must be the binned facts in canonical order.
pub fn fact_positions(
    facts: &[&AtomicFact],
    word_count: usize,
    sentence_count: usize,
    coordinate: Coordinate,
) -> (Vec<f64>, f64) {
    match coordinate {
        Coordinate::Words => (facts.iter().map(|f| f.position_words).collect(), word_count as f64),
        Coordinate::Facts => (
            (0..facts.len()).map(|i| i as f64 + 0.5).collect(),
            facts.len() as f64,
        ),
        Coordinate::Sentences => (
            facts.iter().map(|f| f.sentence_index as f64 + 0.5).collect(),
            sentence_count as f64,
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinOptions {
    pub bin_count: usize,
    pub mode: BinMode,
    pub coordinate: Coordinate,
}

impl Default for BinOptions {
    fn default() -> Self {
        BinOptions {
            bin_count: DEFAULT_BIN_COUNT,
            mode: BinMode::FixedDomain,
            coordinate: Coordinate::Words,
        }
    }
}

/// Per-summary bin report, the unit written to bin-report JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub summary_id: String,
    pub bin_count: usize,
    pub edges: Vec<f64>,
    pub means: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub sensitivity: Option<f64>,
}

impl BinReport {
    pub fn new(summary_id: impl Into<String>, profile: &BinProfile) -> Self {
        let report = sensitivity(profile);
        BinReport {
            summary_id: summary_id.into(),
            bin_count: profile.bin_count,
            edges: profile.edges.clone(),
            means: profile.means.clone(),
            counts: profile.counts.clone(),
            sensitivity: report.sensitivity,
        }
    }

    pub fn profile(&self) -> BinProfile {
        BinProfile {
            bin_count: self.bin_count,
            edges: self.edges.clone(),
            means: self.means.clone(),
            counts: self.counts.clone(),
        }
    }
}

/// Bins `(fact, score)` pairs of one summary and computes its report.
pub fn profile_summary(
    summary_id: &str,
    scored: &[(&AtomicFact, f64)],
    word_count: usize,
    sentence_count: usize,
    options: BinOptions,
) -> Result<BinReport, BinError> {
    let facts: Vec<&AtomicFact> = scored.iter().map(|(f, _)| *f).collect();
    let scores: Vec<f64> = scored.iter().map(|(_, s)| *s).collect();
    let (positions, domain) = fact_positions(&facts, word_count, sentence_count, options.coordinate);
    let assignment = assign_bins(&positions, domain, options.bin_count, options.mode)?;
    let profile = bin_profile(&scores, &assignment)?;
    Ok(BinReport::new(summary_id, &profile))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// CSV with one row per summary: id, bin count, K means, K counts, sensitivity.
/// Reports must share a bin count; the header follows the first report.
pub fn reports_to_csv(reports: &[BinReport]) -> String {
    let k = reports.first().map_or(DEFAULT_BIN_COUNT, |r| r.bin_count);
    let mut header = vec!["summary_id".to_owned(), "bin_count".to_owned()];
    header.extend((1..=k).map(|i| format!("mean_{i}")));
    header.extend((1..=k).map(|i| format!("count_{i}")));
    header.push("sensitivity".to_owned());
    let mut out = header.join(",");
    out.push('\n');
    for r in reports {
        let mut row = vec![csv_field(&r.summary_id), r.bin_count.to_string()];
        row.extend(r.means.iter().map(|m| fmt_opt(*m)));
        row.extend(r.counts.iter().map(usize::to_string));
        row.push(r.sensitivity.map(|s| format!("{s:.2}")).unwrap_or_default());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}
