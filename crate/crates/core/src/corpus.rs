//! Data model, corpus ingestion and summary hygiene.
//!
//! A *word* is a maximal run of non-whitespace characters in the
//! NFKC-normalized text. Every count, span and bin coordinate in the crate
//! uses this one definition; [`Document::new`] and [`SummaryRecord::new`]
//! normalize their text on construction so offsets always refer to the
//! stored string.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::segment::split_sentences;

pub const DEFAULT_REPETITION_NGRAM: usize = 3;
pub const DEFAULT_REPETITION_THRESHOLD: f64 = 0.8;

/// Word range requested for standard summaries.
pub const STANDARD_WORD_RANGE: (u64, u64) = (100, 200);

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("duplicate id {0}")]
    DuplicateId(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid decoding config: {0}")]
    InvalidDecoding(String),
}

fn line_error(line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Line {
        line,
        message: message.into(),
    }
}

pub fn normalize_text(text: &str) -> String {
    text.nfkc().collect()
}

/// Words of an already normalized text.
pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

pub fn word_count(text: &str) -> usize {
    words(text).count()
}

/// Token estimate used when no upstream tokenizer count is available:
/// `ceil(words / 0.75)`, and at least 1 for any non-empty text.
pub fn estimate_tokens(text: &str) -> u64 {
    let w = word_count(text) as u64;
    let est = (4 * w).div_ceil(3);
    if est == 0 && !text.is_empty() {
        1
    } else {
        est
    }
}

/// Lowercase, drop every character that is not alphanumeric or whitespace,
/// and return the remaining words.
pub fn normalized_words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(|c| c.to_lowercase())
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// One sentence inside a document or summary. Word offsets index the
/// whitespace-delimited words; char offsets are byte offsets into the text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub index: usize,
    pub start_word: usize,
    pub end_word: usize,
    pub start_char: usize,
    pub end_char: usize,
}

impl SentenceSpan {
    pub fn word_len(&self) -> usize {
        self.end_word - self.start_word
    }

    /// Midpoint word offset, the default positional coordinate of the facts
    /// extracted from this sentence.
    pub fn midpoint(&self) -> f64 {
        (self.start_word + self.end_word) as f64 / 2.0
    }

    pub fn text<'a>(&self, source: &'a str) -> &'a str {
        &source[self.start_char..self.end_char]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Standard,
    Long,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Standard => "standard",
            Regime::Long => "long",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "standard" => Some(Regime::Standard),
            "long" => Some(Regime::Long),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    Reference,
    External,
}

/// Decoding strategy of a generation request. Parameters that do not apply
/// to a strategy are not representable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum DecodingConfig {
    Greedy,
    TemperatureTopP { temperature: f64, top_p: f64 },
    TopK { top_k: u32 },
    Eta { eta: f64 },
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig::Greedy
    }
}

impl DecodingConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        match *self {
            DecodingConfig::Greedy => Ok(()),
            DecodingConfig::TemperatureTopP { temperature, top_p } => {
                if !(temperature >= 0.0 && temperature.is_finite()) {
                    return Err(CorpusError::InvalidDecoding(format!(
                        "temperature must be >= 0, got {temperature}"
                    )));
                }
                if !(top_p > 0.0 && top_p <= 1.0) {
                    return Err(CorpusError::InvalidDecoding(format!(
                        "top_p must be in (0, 1], got {top_p}"
                    )));
                }
                Ok(())
            }
            DecodingConfig::TopK { top_k } => {
                if top_k == 0 {
                    return Err(CorpusError::InvalidDecoding("top_k must be >= 1".into()));
                }
                Ok(())
            }
            DecodingConfig::Eta { eta } => {
                if !(eta > 0.0 && eta.is_finite()) {
                    return Err(CorpusError::InvalidDecoding(format!(
                        "eta must be > 0, got {eta}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Sampling temperature sent on the wire. Greedy is fixed at 0; top-k
    /// and eta sampling draw from the untempered distribution.
    pub fn temperature(&self) -> f64 {
        match *self {
            DecodingConfig::Greedy => 0.0,
            DecodingConfig::TemperatureTopP { temperature, .. } => temperature,
            DecodingConfig::TopK { .. } | DecodingConfig::Eta { .. } => 1.0,
        }
    }

    /// Short stable label, used in record ids and report group keys.
    pub fn label(&self) -> String {
        match *self {
            DecodingConfig::Greedy => "greedy".to_owned(),
            DecodingConfig::TemperatureTopP { temperature, top_p } => {
                format!("t{temperature}-p{top_p}")
            }
            DecodingConfig::TopK { top_k } => format!("k{top_k}"),
            DecodingConfig::Eta { eta } => format!("eta{eta}"),
        }
    }

    /// The decoding sweep: temperature x top-p, top-k and eta sampling.
    pub fn sweep_grid() -> Vec<DecodingConfig> {
        let mut grid = Vec::new();
        for temperature in [0.5, 0.7] {
            for top_p in [0.7, 0.9] {
                grid.push(DecodingConfig::TemperatureTopP { temperature, top_p });
            }
        }
        grid.push(DecodingConfig::TopK { top_k: 20 });
        grid.push(DecodingConfig::TopK { top_k: 100 });
        grid.push(DecodingConfig::Eta { eta: 6e-4 });
        grid.push(DecodingConfig::Eta { eta: 4e-3 });
        grid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub sentences: Vec<SentenceSpan>,
    pub token_count: u64,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl Document {
    /// Builds a document from raw text. `token_count` comes from
    /// `meta["context_tokens"]` when present, otherwise it is estimated.
    pub fn new(id: impl Into<String>, text: &str, meta: BTreeMap<String, String>) -> Self {
        let text = normalize_text(text);
        let sentences = split_sentences(&text);
        let token_count = meta
            .get("context_tokens")
            .and_then(|v| v.parse::<u64>().ok())
            .unwrap_or_else(|| estimate_tokens(&text));
        Document {
            id: id.into(),
            text,
            sentences,
            token_count,
            meta,
        }
    }

    pub fn word_count(&self) -> usize {
        word_count(&self.text)
    }

    pub fn sentence_text(&self, index: usize) -> &str {
        self.sentences[index].text(&self.text)
    }

    pub fn sentence_texts(&self) -> Vec<&str> {
        self.sentences.iter().map(|s| s.text(&self.text)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub id: String,
    pub document_id: String,
    pub text: String,
    pub sentences: Vec<SentenceSpan>,
    pub word_count: usize,
    pub regime: Regime,
    #[serde(default)]
    pub decoding: DecodingConfig,
    pub provenance: Provenance,
    /// Free-form metadata: `model`, `dataset`, `context_tokens`, merge trees.
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

impl SummaryRecord {
    pub fn new(
        id: impl Into<String>,
        document_id: impl Into<String>,
        text: &str,
        regime: Regime,
        decoding: DecodingConfig,
        provenance: Provenance,
    ) -> Self {
        let text = normalize_text(text);
        let sentences = split_sentences(&text);
        let word_count = word_count(&text);
        SummaryRecord {
            id: id.into(),
            document_id: document_id.into(),
            text,
            sentences,
            word_count,
            regime,
            decoding,
            provenance,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, meta: BTreeMap<String, String>) -> Self {
        self.meta = meta;
        self
    }

    pub fn sentence_text(&self, index: usize) -> &str {
        self.sentences[index].text(&self.text)
    }

    pub fn model(&self) -> Option<&str> {
        self.meta.get("model").map(String::as_str)
    }
}

/// One corpus line after ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub document: Document,
    pub summary: Option<SummaryRecord>,
    pub reference: Option<SummaryRecord>,
}

impl CorpusEntry {
    /// The summary under study: the generated/external one if present,
    /// otherwise the reference summary.
    pub fn primary_summary(&self) -> Option<&SummaryRecord> {
        self.summary.as_ref().or(self.reference.as_ref())
    }
}

/// Loads a corpus JSONL file. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusEntry>, CorpusError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&raw)
}

pub fn parse_corpus(raw: &str) -> Result<Vec<CorpusEntry>, CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry = parse_line(line, lineno)?;
        if !seen.insert(entry.document.id.clone()) {
            return Err(CorpusError::DuplicateId(entry.document.id));
        }
        out.push(entry);
    }
    Ok(out)
}

fn required_str(obj: &Map<String, Value>, field: &str, line: usize) -> Result<String, CorpusError> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(line_error(line, format!("missing field {field}"))),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(line_error(line, format!("field {field} must be a string"))),
    }
}

fn optional_str(
    obj: &Map<String, Value>,
    field: &str,
    line: usize,
) -> Result<Option<String>, CorpusError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(line_error(line, format!("field {field} must be a string"))),
    }
}

fn parse_line(line: &str, lineno: usize) -> Result<CorpusEntry, CorpusError> {
    let value: Value = serde_json::from_str(line)
        .map_err(|e| line_error(lineno, format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| line_error(lineno, "expected a JSON object"))?;

    let id = required_str(obj, "id", lineno)?;
    let document_text = required_str(obj, "document", lineno)?;
    let summary_text = optional_str(obj, "summary", lineno)?;
    let reference_text = optional_str(obj, "reference_summary", lineno)?;

    let mut meta = BTreeMap::new();
    match obj.get("meta") {
        None | Some(Value::Null) => {}
        Some(Value::Object(m)) => {
            for (k, v) in m {
                let s = match v {
                    Value::String(s) => s.clone(),
                    Value::Number(n) => n.to_string(),
                    Value::Bool(b) => b.to_string(),
                    Value::Null => continue,
                    _ => {
                        return Err(line_error(
                            lineno,
                            format!("meta.{k} must be a string, number or boolean"),
                        ))
                    }
                };
                meta.insert(k.clone(), s);
            }
        }
        Some(_) => return Err(line_error(lineno, "field meta must be an object")),
    }
    if let Some(ct) = meta.get("context_tokens") {
        if ct.parse::<u64>().is_err() {
            return Err(line_error(
                lineno,
                format!("meta.context_tokens must be a non-negative integer, got {ct}"),
            ));
        }
    }
    let regime = match meta.get("regime") {
        None => Regime::Standard,
        Some(r) => Regime::parse(r)
            .ok_or_else(|| line_error(lineno, format!("meta.regime must be standard or long, got {r}")))?,
    };
    let decoding = match obj.get("decoding") {
        None | Some(Value::Null) => DecodingConfig::Greedy,
        Some(v) => {
            let d: DecodingConfig = serde_json::from_value(v.clone())
                .map_err(|e| line_error(lineno, format!("invalid decoding: {e}")))?;
            d.validate().map_err(|e| line_error(lineno, e.to_string()))?;
            d
        }
    };

    let summary_meta = summary_meta_from(&meta);
    let document = Document::new(id.clone(), &document_text, meta);
    let summary = summary_text.map(|text| {
        SummaryRecord::new(
            format!("{id}#summary"),
            id.clone(),
            &text,
            regime,
            decoding.clone(),
            Provenance::External,
        )
        .with_meta(summary_meta.clone())
    });
    let reference = reference_text.map(|text| {
        SummaryRecord::new(
            format!("{id}#reference"),
            id.clone(),
            &text,
            regime,
            DecodingConfig::Greedy,
            Provenance::Reference,
        )
        .with_meta(summary_meta.clone())
    });
    Ok(CorpusEntry {
        document,
        summary,
        reference,
    })
}

fn summary_meta_from(doc_meta: &BTreeMap<String, String>) -> BTreeMap<String, String> {
    doc_meta
        .iter()
        .filter(|(k, _)| matches!(k.as_str(), "dataset" | "context_tokens" | "model"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

/// Serializes entries back to corpus JSONL (one line per entry, trailing LF).
pub fn corpus_to_jsonl(entries: &[CorpusEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let mut obj = Map::new();
        obj.insert("id".into(), Value::String(e.document.id.clone()));
        obj.insert("document".into(), Value::String(e.document.text.clone()));
        if let Some(s) = &e.summary {
            obj.insert("summary".into(), Value::String(s.text.clone()));
            if s.decoding != DecodingConfig::Greedy {
                obj.insert(
                    "decoding".into(),
                    serde_json::to_value(&s.decoding).expect("decoding serializes"),
                );
            }
        }
        if let Some(r) = &e.reference {
            obj.insert("reference_summary".into(), Value::String(r.text.clone()));
        }
        if !e.document.meta.is_empty() {
            let mut meta = Map::new();
            for (k, v) in &e.document.meta {
                let value = if k == "context_tokens" {
                    v.parse::<u64>()
                        .map(|n| Value::Number(n.into()))
                        .unwrap_or_else(|_| Value::String(v.clone()))
                } else {
                    Value::String(v.clone())
                };
                meta.insert(k.clone(), value);
            }
            obj.insert("meta".into(), Value::Object(meta));
        }
        out.push_str(&Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}

/// Word range requested for long summaries: 20% to 25% of the context
/// length in tokens, each rounded half-up.
pub fn words_range_for_context(context_tokens: u64) -> (u64, u64) {
    let lower = (context_tokens * 20 + 50) / 100;
    let upper = (context_tokens * 25 + 50) / 100;
    (lower, upper)
}

/// Word range placed in the generation prompt for a regime.
pub fn words_range_for_regime(regime: Regime, context_tokens: u64) -> (u64, u64) {
    match regime {
        Regime::Standard => STANDARD_WORD_RANGE,
        Regime::Long => words_range_for_context(context_tokens),
    }
}

fn ngram_set(words: &[String], n: usize) -> HashSet<&[String]> {
    if words.len() < n {
        return HashSet::new();
    }
    words.windows(n).collect()
}

/// True when two sentences of the summary repeat each other: identical after
/// normalization, or sharing at least `threshold` of their word n-grams
/// (overlap coefficient: shared / size of the smaller n-gram set).
pub fn detect_repetition(summary: &SummaryRecord, ngram: usize, threshold: f64) -> bool {
    let ngram = ngram.max(1);
    let normalized: Vec<Vec<String>> = summary
        .sentences
        .iter()
        .map(|s| normalized_words(s.text(&summary.text)))
        .filter(|w| !w.is_empty())
        .collect();
    let grams: Vec<HashSet<&[String]>> = normalized.iter().map(|w| ngram_set(w, ngram)).collect();
    for i in 0..normalized.len() {
        for j in (i + 1)..normalized.len() {
            if normalized[i] == normalized[j] {
                return true;
            }
            let (a, b) = (&grams[i], &grams[j]);
            let smaller = a.len().min(b.len());
            if smaller == 0 {
                continue;
            }
            let shared = a.intersection(b).count();
            if shared as f64 / smaller as f64 >= threshold {
                return true;
            }
        }
    }
    false
}

/// Keeps only the summaries with the highest sentence count. Callers are
/// expected to pass one (dataset, context bucket, regime) group; see
/// [`filter_length_matched_grouped`].
pub fn filter_length_matched(summaries: &[SummaryRecord]) -> Vec<SummaryRecord> {
    let Some(max) = summaries.iter().map(|s| s.sentences.len()).max() else {
        return Vec::new();
    };
    summaries
        .iter()
        .filter(|s| s.sentences.len() == max)
        .cloned()
        .collect()
}

/// Group key used for length matching: (dataset, context bucket, regime).
pub fn length_match_key(summary: &SummaryRecord) -> (String, String, Regime) {
    (
        summary.meta.get("dataset").cloned().unwrap_or_default(),
        summary.meta.get("context_tokens").cloned().unwrap_or_default(),
        summary.regime,
    )
}

/// Applies [`filter_length_matched`] within each (dataset, context bucket,
/// regime) group, preserving input order.
pub fn filter_length_matched_grouped(summaries: &[SummaryRecord]) -> Vec<SummaryRecord> {
    let mut groups: BTreeMap<(String, String, Regime), Vec<SummaryRecord>> = BTreeMap::new();
    for s in summaries {
        groups.entry(length_match_key(s)).or_default().push(s.clone());
    }
    let keep: HashSet<String> = groups
        .values()
        .flat_map(|g| filter_length_matched(g))
        .map(|s| s.id)
        .collect();
    summaries
        .iter()
        .filter(|s| keep.contains(&s.id))
        .cloned()
        .collect()
}
