//! Stage functions shared by the CLI, and the end-to-end run:
//! generate, decompose, filter, score, bin, aggregate, render.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::concurrency::bounded_map;
use crate::corpus::{
    detect_repetition, load_corpus, DecodingConfig, Document, Regime, SummaryRecord, DEFAULT_REPETITION_NGRAM,
    DEFAULT_REPETITION_THRESHOLD,
};
use crate::llmclient::{generate_summary, ChatClient, ClientConfig, HttpChatClient, LlmError};
use crate::positional::{profile_summary, BinError, BinOptions, BinReport};
use crate::report::{aggregate, render, AggregateTable, Format, GroupKey, Pooling};
use crate::scorers::{load_labels, score_summary, FactScore, HttpFactcheck, HumanLabels, RougeScorer, ScorerBackend};
use crate::segment::{decompose_summary, filter_facts, AtomicFact, Decomposer};
use crate::{Error, Result};

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_file(path: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScorerChoice {
    Rouge,
    Http { endpoint: String },
    Labels { path: PathBuf, annotator: Option<String> },
}

impl ScorerChoice {
    pub fn build(&self) -> Result<ScorerBackend> {
        Ok(match self {
            ScorerChoice::Rouge => ScorerBackend::RougeL(RougeScorer),
            ScorerChoice::Http { endpoint } => ScorerBackend::Http(HttpFactcheck::new(endpoint.clone())),
            ScorerChoice::Labels { path, annotator } => {
                let records = load_labels(path)?;
                ScorerBackend::Labels(HumanLabels::from_records(&records, annotator.as_deref()))
            }
        })
    }
}

/// One summary per (document, decoding) pair, documents outermost. Stops
/// at the first failure.
pub fn generate_all(
    documents: &[Document],
    regime: Regime,
    grid: &[DecodingConfig],
    client: &dyn ChatClient,
    concurrency: usize,
) -> std::result::Result<Vec<SummaryRecord>, LlmError> {
    let cells: Vec<(&Document, &DecodingConfig)> =
        documents.iter().flat_map(|d| grid.iter().map(move |g| (d, g))).collect();
    bounded_map(&cells, concurrency, |(d, g)| generate_summary(d, regime, g, client))
        .into_iter()
        .collect()
}

/// Summaries flagged by the repetition filter, as (id, reason).
pub fn drop_repetitive(summaries: Vec<SummaryRecord>) -> (Vec<SummaryRecord>, Vec<(String, String)>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for s in summaries {
        if detect_repetition(&s, DEFAULT_REPETITION_NGRAM, DEFAULT_REPETITION_THRESHOLD) {
            dropped.push((s.id.clone(), "repetitive".to_owned()));
        } else {
            kept.push(s);
        }
    }
    (kept, dropped)
}

/// Decomposes and filters every summary. Returns all facts (kept or not)
/// and any fallback warnings.
pub fn decompose_all(
    summaries: &[SummaryRecord],
    decomposer: &Decomposer<'_>,
) -> std::result::Result<(Vec<AtomicFact>, Vec<String>), LlmError> {
    let mut facts = Vec::new();
    let mut warnings = Vec::new();
    for s in summaries {
        let out = decompose_summary(s, decomposer)?;
        facts.extend(filter_facts(&out.facts));
        warnings.extend(out.warnings.into_iter().map(|w| format!("{}: {w}", s.id)));
    }
    Ok((facts, warnings))
}

fn group_by_summary<'a, T>(items: &'a [T], id: impl Fn(&T) -> &str) -> HashMap<&'a str, Vec<&'a T>> {
    let mut map: HashMap<&str, Vec<&T>> = HashMap::new();
    for item in items {
        map.entry(id(item)).or_default().push(item);
    }
    map
}

/// Scores the kept facts of every summary against its source document.
pub fn score_all(
    summaries: &[SummaryRecord],
    documents: &[Document],
    facts: &[AtomicFact],
    backend: &ScorerBackend,
    concurrency: usize,
) -> Result<Vec<FactScore>> {
    let docs: HashMap<&str, &Document> = documents.iter().map(|d| (d.id.as_str(), d)).collect();
    let by_summary = group_by_summary(facts, |f| f.summary_id.as_str());
    let mut out = Vec::new();
    for s in summaries {
        let Some(own) = by_summary.get(s.id.as_str()) else {
            continue;
        };
        let doc = docs
            .get(s.document_id.as_str())
            .ok_or_else(|| Error::Data(format!("summary {} references unknown document {}", s.id, s.document_id)))?;
        let own: Vec<AtomicFact> = own.iter().map(|f| (*f).clone()).collect();
        out.extend(score_summary(&own, doc, backend, concurrency)?);
    }
    Ok(out)
}

/// One bin report per summary. Summaries whose positions cannot be binned
/// (observed-range mode with fewer than two distinct positions) are
/// returned separately with the reason.
pub fn profile_all(
    summaries: &[SummaryRecord],
    scored: &[FactScore],
    options: BinOptions,
) -> Result<(Vec<BinReport>, Vec<(String, String)>)> {
    let by_summary = group_by_summary(scored, |f| f.fact.summary_id.as_str());
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for s in summaries {
        let pairs: Vec<(&AtomicFact, f64)> = by_summary
            .get(s.id.as_str())
            .map(|v| v.iter().map(|f| (&f.fact, f.score)).collect())
            .unwrap_or_default();
        match profile_summary(&s.id, &pairs, s.word_count, s.sentences.len(), options) {
            Ok(r) => reports.push(r),
            Err(e @ BinError::DegenerateRange) => skipped.push((s.id.clone(), e.to_string())),
            Err(e) => return Err(e.into()),
        }
    }
    Ok((reports, skipped))
}

/// Aggregates bin reports by the group key of their summaries.
pub fn build_table(reports: &[BinReport], summaries: &[SummaryRecord], pooling: Pooling) -> Result<AggregateTable> {
    let by_id: HashMap<&str, &SummaryRecord> = summaries.iter().map(|s| (s.id.as_str(), s)).collect();
    let profiles = reports
        .iter()
        .map(|r| {
            let s = by_id
                .get(r.summary_id.as_str())
                .ok_or_else(|| Error::Data(format!("bin report for unknown summary {}", r.summary_id)))?;
            Ok((GroupKey::for_summary(s), r.profile()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&profiles, pooling)?)
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    pub endpoint: String,
    pub model: String,
    pub cache_dir: Option<PathBuf>,
    pub concurrency: usize,
    pub regime: Regime,
    pub grid: Vec<DecodingConfig>,
    /// Generate summaries; otherwise use the summaries in the corpus.
    pub generate: bool,
    /// Decompose with the LLM; otherwise with the rule splitter.
    pub llm_decompose: bool,
    pub drop_repetitive: bool,
    pub scorer: ScorerChoice,
    pub bins: BinOptions,
    pub pooling: Pooling,
}

impl PipelineConfig {
    pub fn new(corpus: impl Into<PathBuf>, out_dir: impl Into<PathBuf>, endpoint: impl Into<String>) -> Self {
        PipelineConfig {
            corpus: corpus.into(),
            out_dir: out_dir.into(),
            endpoint: endpoint.into(),
            model: "default".to_owned(),
            cache_dir: None,
            concurrency: 4,
            regime: Regime::Long,
            grid: vec![DecodingConfig::Greedy],
            generate: true,
            llm_decompose: true,
            drop_repetitive: true,
            scorer: ScorerChoice::Rouge,
            bins: BinOptions::default(),
            pooling: Pooling::FactPooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStats {
    pub summaries: usize,
    pub facts: usize,
    pub kept_facts: usize,
    pub network_calls: usize,
    pub cache_hits: usize,
    pub skipped: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub table: AggregateTable,
    pub reports: Vec<BinReport>,
    pub stats: RunStats,
}

/// Runs every stage and writes `summaries.jsonl`, `facts.jsonl`,
/// `scores.jsonl`, `bins.jsonl`, `report.{md,csv,json,svg}` and `run.json`
/// into `out_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput> {
    let entries = load_corpus(&config.corpus)?;
    let documents: Vec<Document> = entries.iter().map(|e| e.document.clone()).collect();
    let mut client_config = ClientConfig::new(&config.endpoint, &config.model);
    client_config.cache_dir = config.cache_dir.clone();
    client_config.concurrency = config.concurrency;
    let client = HttpChatClient::new(client_config)?;

    let summaries = if config.generate {
        tracing::info!(documents = documents.len(), "generating summaries");
        generate_all(&documents, config.regime, &config.grid, &client, config.concurrency)?
    } else {
        entries.iter().filter_map(|e| e.primary_summary().cloned()).collect()
    };
    let (summaries, mut skipped) = if config.drop_repetitive {
        drop_repetitive(summaries)
    } else {
        (summaries, Vec::new())
    };

    let decomposer = if config.llm_decompose {
        Decomposer::Llm {
            client: &client,
            concurrency: config.concurrency,
        }
    } else {
        Decomposer::Rule
    };
    tracing::info!(summaries = summaries.len(), "decomposing");
    let (facts, warnings) = decompose_all(&summaries, &decomposer)?;
    let backend = config.scorer.build()?;
    tracing::info!(facts = facts.len(), scorer = %backend.kind(), "scoring");
    let scored = score_all(&summaries, &documents, &facts, &backend, config.concurrency)?;
    let (reports, unbinned) = profile_all(&summaries, &scored, config.bins)?;
    skipped.extend(unbinned);
    let table = build_table(&reports, &summaries, config.pooling)?;

    let out = &config.out_dir;
    write_file(out.join("summaries.jsonl"), to_jsonl(&summaries))?;
    write_file(out.join("facts.jsonl"), to_jsonl(&facts))?;
    write_file(out.join("scores.jsonl"), to_jsonl(&scored))?;
    write_file(out.join("bins.jsonl"), to_jsonl(&reports))?;
    for (format, ext) in [
        (Format::Markdown, "md"),
        (Format::Csv, "csv"),
        (Format::Json, "json"),
        (Format::SvgLines, "svg"),
    ] {
        write_file(out.join(format!("report.{ext}")), render(&table, format))?;
    }
    let stats = RunStats {
        summaries: summaries.len(),
        facts: facts.len(),
        kept_facts: facts.iter().filter(|f| f.kept).count(),
        network_calls: client.network_calls(),
        cache_hits: client.cache_hits(),
        skipped,
        warnings,
    };
    let run = json!({
        "summaries": stats.summaries,
        "facts": stats.facts,
        "kept_facts": stats.kept_facts,
        "network_calls": stats.network_calls,
        "cache_hits": stats.cache_hits,
        "skipped": stats.skipped,
        "warnings": stats.warnings,
    });
    write_file(out.join("run.json"), serde_json::to_string_pretty(&run).expect("json") + "\n")?;
    Ok(PipelineOutput { table, reports, stats })
}
