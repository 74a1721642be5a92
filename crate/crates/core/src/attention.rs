//! Block-to-sentence attention aggregation.
//!
//! The full sequence (prompt followed by output) is cut into blocks of 100
//! tokens. For each block and each of three target output sentences (first,
//! middle, last) the aggregate is the mean attention weight over all
//! (block token, sentence token) pairs.
//!
//! Matrices are row-major with the row as the attending token. Under causal
//! masking a block that precedes a sentence cannot attend to it, so prompt
//! blocks give zero under [`Orientation::RowAttends`]. [`Orientation::Transposed`]
//! reads the column as the attending token instead, which measures how much
//! the sentence attends to the block.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BLOCK_TOKENS: usize = 100;
/// Rows whose sum is off by at most this much are rescaled on load.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-3;
/// Post-normalization row-sum check.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {message}")]
    Json { path: String, message: String },
    #[error("invalid attention metadata: {0}")]
    Meta(String),
    #[error("matrix.f32 size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },
    #[error("expected {expected} values for a {seq_len}x{seq_len} matrix, got {actual}")]
    Shape { seq_len: usize, expected: usize, actual: usize },
    #[error("non-causal weight {value} at row {row}, column {col}")]
    NotCausal { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, too far from 1 to renormalize")]
    RowSum { row: usize, sum: f64 },
    #[error("no output sentences")]
    NoSentences,
    #[error("span [{start}, {end}) outside output region [{lo}, {hi})")]
    SpanOutOfBounds { start: usize, end: usize, lo: usize, hi: usize },
    #[error("empty span at token {0}")]
    EmptySpan(usize),
    #[error("spans out of order at sentence {0}")]
    UnorderedSpans(usize),
}

impl AttentionError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        AttentionError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Avg,
    Stack,
}

/// Contents of `meta.json` in an attention bundle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMeta {
    pub seq_len: usize,
    pub prompt_len: usize,
    #[serde(default = "one")]
    pub layers: usize,
    #[serde(default = "one")]
    pub heads: usize,
    #[serde(default)]
    pub layout: Layout,
}

fn one() -> usize {
    1
}

impl AttentionMeta {
    /// Number of L x L matrices in the payload.
    pub fn matrix_count(&self) -> usize {
        match self.layout {
            Layout::Avg => 1,
            Layout::Stack => self.layers * self.heads,
        }
    }

    pub fn expected_bytes(&self) -> u64 {
        self.matrix_count() as u64 * (self.seq_len as u64).pow(2) * 4
    }
}

/// Dense L x L attention, row = attending token, column = attended token.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub seq_len: usize,
    pub prompt_len: usize,
    values: Vec<f64>,
}

impl AttentionMatrix {
    /// Wraps row-major values. Only the shape is checked; see [`Self::validate`].
    pub fn from_values(seq_len: usize, prompt_len: usize, values: Vec<f64>) -> Result<Self, AttentionError> {
        if values.len() != seq_len * seq_len {
            return Err(AttentionError::Shape {
                seq_len,
                expected: seq_len * seq_len,
                actual: values.len(),
            });
        }
        if seq_len == 0 || prompt_len > seq_len {
            return Err(AttentionError::Meta(format!(
                "need 0 <= prompt_len <= seq_len and seq_len >= 1, got prompt_len {prompt_len}, seq_len {seq_len}"
            )));
        }
        Ok(AttentionMatrix {
            seq_len,
            prompt_len,
            values,
        })
    }

    pub fn from_fn(seq_len: usize, prompt_len: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self, AttentionError> {
        let values = (0..seq_len * seq_len).map(|n| f(n / seq_len, n % seq_len)).collect();
        Self::from_values(seq_len, prompt_len, values)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.seq_len + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.seq_len..(row + 1) * self.seq_len]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Element-wise mean of same-shaped matrices.
    pub fn mean(matrices: &[AttentionMatrix]) -> Result<Self, AttentionError> {
        let first = matrices.first().ok_or_else(|| AttentionError::Meta("empty matrix stack".into()))?;
        let mut sum = vec![0.0; first.values.len()];
        for m in matrices {
            if m.seq_len != first.seq_len {
                return Err(AttentionError::Shape {
                    seq_len: first.seq_len,
                    expected: first.values.len(),
                    actual: m.values.len(),
                });
            }
            for (s, v) in sum.iter_mut().zip(&m.values) {
                *s += v;
            }
        }
        let n = matrices.len() as f64;
        sum.iter_mut().for_each(|s| *s /= n);
        Self::from_values(first.seq_len, first.prompt_len, sum)
    }

    fn check_causal(&self, row: usize) -> Result<(), AttentionError> {
        match self.row(row).iter().enumerate().skip(row + 1).find(|(_, v)| **v != 0.0) {
            Some((col, &value)) => Err(AttentionError::NotCausal { row, col, value }),
            None => Ok(()),
        }
    }

    /// Checks causality and that each row sums to 1 within [`ROW_SUM_TOLERANCE`].
    pub fn validate(&self) -> Result<(), AttentionError> {
        for row in 0..self.seq_len {
            self.check_causal(row)?;
            let sum: f64 = self.row(row).iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(AttentionError::RowSum { row, sum });
            }
        }
        Ok(())
    }

    /// Rescales rows that are within [`RENORMALIZE_TOLERANCE`] of summing
    /// to 1 and rejects the rest.
    pub fn normalized(mut self) -> Result<Self, AttentionError> {
        let n = self.seq_len;
        for row in 0..n {
            self.check_causal(row)?;
            let slice = &mut self.values[row * n..(row + 1) * n];
            let sum: f64 = slice.iter().sum();
            if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
                return Err(AttentionError::RowSum { row, sum });
            }
            slice.iter_mut().for_each(|v| *v /= sum);
        }
        self.validate()?;
        Ok(self)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AttentionError> {
    let raw = fs::read_to_string(path).map_err(|e| AttentionError::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| AttentionError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Loads `meta.json` and `matrix.f32` from an attention bundle directory.
/// Stacked layouts are averaged; rows are then renormalized and validated.
pub fn load_attention(dir: impl AsRef<Path>) -> Result<AttentionMatrix, AttentionError> {
    let dir = dir.as_ref();
    let meta: AttentionMeta = read_json(&dir.join("meta.json"))?;
    if meta.seq_len == 0 || meta.prompt_len > meta.seq_len || meta.matrix_count() == 0 {
        return Err(AttentionError::Meta(format!("{meta:?}")));
    }
    let path = dir.join("matrix.f32");
    let bytes = fs::read(&path).map_err(|e| AttentionError::io(&path, e))?;
    if bytes.len() as u64 != meta.expected_bytes() {
        return Err(AttentionError::SizeMismatch {
            expected: meta.expected_bytes(),
            actual: bytes.len() as u64,
        });
    }
    let floats: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let per = meta.seq_len * meta.seq_len;
    let stack = floats
        .chunks_exact(per)
        .map(|m| AttentionMatrix::from_values(meta.seq_len, meta.prompt_len, m.to_vec()))
        .collect::<Result<Vec<_>, _>>()?;
    let matrix = if stack.len() == 1 {
        stack.into_iter().next().expect("one matrix")
    } else {
        AttentionMatrix::mean(&stack)?
    };
    matrix.normalized()
}

/// Writes a bundle with `layout: avg` (or `stack` when given several matrices).
pub fn write_attention(dir: impl AsRef<Path>, matrices: &[AttentionMatrix], layers: usize, heads: usize) -> Result<(), AttentionError> {
    let dir = dir.as_ref();
    let first = matrices.first().ok_or_else(|| AttentionError::Meta("nothing to write".into()))?;
    let meta = AttentionMeta {
        seq_len: first.seq_len,
        prompt_len: first.prompt_len,
        layers,
        heads,
        layout: if matrices.len() == 1 { Layout::Avg } else { Layout::Stack },
    };
    if meta.matrix_count() != matrices.len() {
        return Err(AttentionError::Meta(format!(
            "{} matrices for {layers} layers x {heads} heads",
            matrices.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| AttentionError::io(dir, e))?;
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(|e| AttentionError::io(&meta_path, e))?;
    let bytes: Vec<u8> = matrices
        .iter()
        .flat_map(|m| m.values.iter().flat_map(|v| (*v as f32).to_le_bytes()))
        .collect();
    let path = dir.join("matrix.f32");
    fs::write(&path, bytes).map_err(|e| AttentionError::io(&path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBlock {
    pub index: usize,
    pub start: usize,
    pub length: usize,
}

impl TokenBlock {
    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

/// Tiles `[0, seq_len)` with 100-token blocks; the last block holds the remainder.
pub fn partition_blocks(seq_len: usize) -> Vec<TokenBlock> {
    (0..seq_len.div_ceil(BLOCK_TOKENS))
        .map(|index| {
            let start = index * BLOCK_TOKENS;
            TokenBlock {
                index,
                start,
                length: BLOCK_TOKENS.min(seq_len - start),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub length: usize,
}

impl TokenSpan {
    pub fn new(start: usize, length: usize) -> Self {
        TokenSpan { start, length }
    }

    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSentences {
    pub first: TokenSpan,
    pub middle: TokenSpan,
    pub last: TokenSpan,
    /// Sentence indices of first, middle and last.
    pub indices: (usize, usize, usize),
}

/// Picks sentences `0`, `(S-1)/2` and `S-1`.
pub fn select_targets(spans: &[TokenSpan]) -> Result<TargetSentences, AttentionError> {
    let s = spans.len();
    if s == 0 {
        return Err(AttentionError::NoSentences);
    }
    let (a, b, c) = (0, (s - 1) / 2, s - 1);
    Ok(TargetSentences {
        first: spans[a],
        middle: spans[b],
        last: spans[c],
        indices: (a, b, c),
    })
}

/// Checks that spans are non-empty, ordered and inside the output region.
pub fn check_spans(matrix: &AttentionMatrix, spans: &[TokenSpan]) -> Result<(), AttentionError> {
    let mut prev = 0;
    for (i, span) in spans.iter().enumerate() {
        if span.length == 0 {
            return Err(AttentionError::EmptySpan(span.start));
        }
        if span.start < matrix.prompt_len || span.end() > matrix.seq_len {
            return Err(AttentionError::SpanOutOfBounds {
                start: span.start,
                end: span.end(),
                lo: matrix.prompt_len,
                hi: matrix.seq_len,
            });
        }
        if span.start < prev {
            return Err(AttentionError::UnorderedSpans(i));
        }
        prev = span.start;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// Block tokens are the rows: block attends to sentence.
    #[default]
    RowAttends,
    /// Sentence tokens are the rows: sentence attends to block.
    Transposed,
}

/// Mean of `values[i][j]` over block rows `i` and target columns `j`.
pub fn block_sentence_attention(matrix: &AttentionMatrix, block: TokenBlock, target: TokenSpan) -> f64 {
    block_sentence_attention_oriented(matrix, block, target, Orientation::RowAttends)
}

pub fn block_sentence_attention_oriented(
    matrix: &AttentionMatrix,
    block: TokenBlock,
    target: TokenSpan,
    orientation: Orientation,
) -> f64 {
    let mut total = 0.0;
    for i in block.start..block.end() {
        match orientation {
            Orientation::RowAttends => {
                total += matrix.row(i)[target.start..target.end()].iter().sum::<f64>();
            }
            Orientation::Transposed => {
                total += (target.start..target.end()).map(|j| matrix.get(j, i)).sum::<f64>();
            }
        }
    }
    total / (block.length * target.length) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub block_index: usize,
    pub attn_first: f64,
    pub attn_middle: f64,
    pub attn_last: f64,
}

/// One row per block for the first/middle/last output sentences.
pub fn attention_profile(
    matrix: &AttentionMatrix,
    spans: &[TokenSpan],
    orientation: Orientation,
) -> Result<Vec<ProfileRow>, AttentionError> {
    check_spans(matrix, spans)?;
    let targets = select_targets(spans)?;
    let blocks = partition_blocks(matrix.seq_len);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    Ok(crate::concurrency::bounded_map(&blocks, workers, |&block| ProfileRow {
        block_index: block.index,
        attn_first: block_sentence_attention_oriented(matrix, block, targets.first, orientation),
        attn_middle: block_sentence_attention_oriented(matrix, block, targets.middle, orientation),
        attn_last: block_sentence_attention_oriented(matrix, block, targets.last, orientation),
    }))
}

pub fn profile_csv(rows: &[ProfileRow]) -> String {
    let mut out = String::from("block_index,attn_first,attn_middle,attn_last\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.8},{:.8},{:.8}\n",
            r.block_index, r.attn_first, r.attn_middle, r.attn_last
        ));
    }
    out
}

/// Reads `spans.json`: a list of `{"start", "length"}` token spans.
pub fn load_spans(path: impl AsRef<Path>) -> Result<Vec<TokenSpan>, AttentionError> {
    read_json(path.as_ref())
}
