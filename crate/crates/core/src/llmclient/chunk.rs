//! Chunk-and-merge summarization: summarize fixed-size chunks of the input,
//! then merge the partial summaries pairwise until one remains.

use serde::{Deserialize, Serialize};

use super::{
    max_tokens_for_range, summary_meta, summary_prompt, ChatClient, GenerationRequest, LlmError,
};
use crate::concurrency::bounded_map;
use crate::corpus::{DecodingConfig, Document, Provenance, Regime, SummaryRecord, STANDARD_WORD_RANGE};

pub const DEFAULT_CHUNK_TOKENS: u64 = 2048;
pub const MIN_CHUNK_TOKENS: u64 = 256;

pub const MERGE_PROMPT: &str =
    "Combine the two partial summaries into one coherent summary, preserving all facts.";

/// Sentences of the document packed into one chunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub text: String,
    pub first_sentence: usize,
    pub sentence_count: usize,
    pub estimated_tokens: u64,
    /// A single sentence that alone exceeds the chunk budget.
    pub oversized: bool,
}

/// One node of the merge tree. Leaves summarize a chunk; inner nodes merge
/// exactly two children.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeNode {
    pub id: String,
    pub children: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedSummary {
    pub summary: SummaryRecord,
    pub chunks: Vec<Chunk>,
    pub tree: Vec<MergeNode>,
    pub leaf_calls: usize,
    pub merge_calls: usize,
}

fn tokens_for_words(words: u64) -> u64 {
    (4 * words).div_ceil(3)
}

/// Packs whole sentences greedily into chunks whose estimated token count
/// stays within `chunk_tokens`.
pub fn chunk_document(document: &Document, chunk_tokens: u64) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let mut first = 0;
    let mut words = 0u64;
    let flush = |chunks: &mut Vec<Chunk>, current: &mut Vec<&str>, first: usize, words: u64| {
        if current.is_empty() {
            return;
        }
        let estimated = tokens_for_words(words);
        chunks.push(Chunk {
            text: current.join(" "),
            first_sentence: first,
            sentence_count: current.len(),
            estimated_tokens: estimated,
            oversized: estimated > chunk_tokens,
        });
        current.clear();
    };
    for (i, span) in document.sentences.iter().enumerate() {
        let w = span.word_len() as u64;
        if !current.is_empty() && tokens_for_words(words + w) > chunk_tokens {
            flush(&mut chunks, &mut current, first, words);
            words = 0;
        }
        if current.is_empty() {
            first = i;
        }
        current.push(span.text(&document.text));
        words += w;
    }
    flush(&mut chunks, &mut current, first, words);
    chunks
}

pub fn merge_prompt(left: &str, right: &str) -> String {
    format!("{MERGE_PROMPT}\n\nSummary 1: {left}\n\nSummary 2: {right}")
}

fn call(client: &dyn ChatClient, node: &str, prompt: String, range: (u64, u64)) -> Result<String, LlmError> {
    let request = GenerationRequest::new(
        client.model(),
        prompt,
        DecodingConfig::Greedy,
        max_tokens_for_range(range),
    );
    let wrap = |source: LlmError| LlmError::Node {
        node: node.to_owned(),
        source: Box::new(source),
    };
    let completion = client.complete(&request).map_err(wrap)?;
    let text = completion.text.trim().to_owned();
    if text.is_empty() {
        return Err(wrap(LlmError::EmptyCompletion));
    }
    Ok(text)
}

/// Summarizes each chunk with the standard prompt, then merges partial
/// summaries in a balanced binary tree (an odd node out is carried to the
/// next level). The merge tree is stored as JSON in `meta["merge_tree"]`.
pub fn chunked_summarize(
    document: &Document,
    chunk_tokens: u64,
    client: &dyn ChatClient,
    concurrency: usize,
) -> Result<ChunkedSummary, LlmError> {
    if chunk_tokens < MIN_CHUNK_TOKENS {
        return Err(LlmError::InvalidRequest(format!(
            "chunk_tokens must be >= {MIN_CHUNK_TOKENS}, got {chunk_tokens}"
        )));
    }
    let chunks = chunk_document(document, chunk_tokens);
    if chunks.is_empty() {
        return Err(LlmError::InvalidRequest(format!("document {} is empty", document.id)));
    }
    let leaf_ids: Vec<String> = (0..chunks.len()).map(|i| format!("leaf-{i}")).collect();
    let leaf_inputs: Vec<(&String, &Chunk)> = leaf_ids.iter().zip(&chunks).collect();
    let leaves = bounded_map(&leaf_inputs, concurrency, |(id, chunk)| {
        call(client, id, summary_prompt(STANDARD_WORD_RANGE, &chunk.text), STANDARD_WORD_RANGE)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let mut tree: Vec<MergeNode> = leaf_ids
        .iter()
        .map(|id| MergeNode {
            id: id.clone(),
            children: Vec::new(),
        })
        .collect();
    let mut level: Vec<(String, String)> = leaf_ids.into_iter().zip(leaves).collect();
    let mut merge_calls = 0;
    let mut depth = 1;
    while level.len() > 1 {
        let pairs: Vec<(String, &(String, String), &(String, String))> = level
            .chunks(2)
            .enumerate()
            .filter(|(_, pair)| pair.len() == 2)
            .map(|(i, pair)| (format!("merge-{depth}-{i}"), &pair[0], &pair[1]))
            .collect();
        let merged = bounded_map(&pairs, concurrency, |(id, left, right)| {
            call(client, id, merge_prompt(&left.1, &right.1), STANDARD_WORD_RANGE)
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
        merge_calls += merged.len();
        let mut next = Vec::with_capacity(level.len().div_ceil(2));
        for ((id, left, right), text) in pairs.iter().zip(merged) {
            tree.push(MergeNode {
                id: id.clone(),
                children: vec![left.0.clone(), right.0.clone()],
            });
            next.push((id.clone(), text));
        }
        if level.len() % 2 == 1 {
            next.push(level.last().expect("odd level is non-empty").clone());
        }
        level = next;
        depth += 1;
    }
    let (_, text) = level.pop().expect("one root");

    let mut meta = summary_meta(document, client.model());
    meta.insert("method".to_owned(), "chunk_merge".to_owned());
    meta.insert("chunk_tokens".to_owned(), chunk_tokens.to_string());
    meta.insert(
        "merge_tree".to_owned(),
        serde_json::to_string(&tree).expect("tree serializes"),
    );
    let summary = SummaryRecord::new(
        format!("{}:chunk_merge", document.id),
        document.id.clone(),
        &text,
        Regime::Long,
        DecodingConfig::Greedy,
        Provenance::Generated,
    )
    .with_meta(meta);
    Ok(ChunkedSummary {
        summary,
        leaf_calls: chunks.len(),
        chunks,
        tree,
        merge_calls,
    })
}
