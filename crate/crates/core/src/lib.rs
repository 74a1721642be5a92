//! Positional faithfulness profiling for long generated summaries.
//!
//! The crate decomposes summaries into atomic facts, scores every fact
//! against the sentences of its source document, bins the scores by where
//! the fact sits inside the summary, and reports how much faithfulness
//! drops in the final bin (the *sensitivity*). Decoder attention can be
//! profiled the same way: 100-token blocks against the first, middle and
//! last output sentence.
//!
//! Module map:
//!
//! * [`corpus`]: data model, JSONL ingestion, word accounting, length regimes
//!   and summary hygiene filters.
//! * [`segment`]: sentence splitting, atomic-fact decomposition and filtering.
//! * [`scorers`]: ROUGE-L, HTTP fact-check and human-label backends plus the
//!   per-fact / per-sentence faithfulness reductions.
//! * [`positional`]: bin assignment, per-bin means and sensitivity.
//! * [`attention`]: block-to-sentence attention aggregation.
//! * [`llmclient`]: chat-completion client, response cache, decoding sweeps,
//!   chunk-and-merge summarization and a deterministic stub server.
//! * [`report`]: group aggregation, agreement statistics and rendering.
//! * [`pipeline`]: end-to-end orchestration used by the `posfaith` binary.

pub mod attention;
pub mod concurrency;
pub mod corpus;
pub mod error;
pub mod llmclient;
pub mod pipeline;
pub mod positional;
pub mod report;
pub mod scorers;
pub mod segment;

pub use error::{Error, Result};
