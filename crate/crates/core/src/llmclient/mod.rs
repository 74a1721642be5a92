//! Chat-completion client for summary generation and fact decomposition.
//!
//! Requests go to an OpenAI-compatible `/chat/completions` endpoint. Every
//! request is content-addressed: [`GenerationRequest::cache_key`] hashes all
//! request fields, and [`HttpChatClient`] consults a [`ResponseCache`] before
//! touching the network, so replaying a finished run issues no calls.

pub mod cache;
mod chunk;
pub mod http;
pub mod stub;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::concurrency::{bounded_map, Gate, Throttle};
use crate::corpus::{words_range_for_regime, DecodingConfig, Document, Provenance, Regime, SummaryRecord};

pub use cache::{CacheEntry, ResponseCache};
pub use chunk::{chunk_document, chunked_summarize, merge_prompt, Chunk, ChunkedSummary, MergeNode, DEFAULT_CHUNK_TOKENS, MERGE_PROMPT};
pub use http::RetryPolicy;

pub const API_KEY_ENV: &str = "POSFAITH_API_KEY";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("LLM service failed: {0}")]
    Http(http::HttpFailure),
    #[error("LLM service returned an empty completion")]
    EmptyCompletion,
    #[error("unsupported decoding parameter: {0}")]
    UnsupportedParameter(String),
    #[error("malformed LLM response: {0}")]
    Decode(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
    #[error("{node}: {source}")]
    Node {
        node: String,
        #[source]
        source: Box<LlmError>,
    },
}

impl LlmError {
    pub fn is_upstream(&self) -> bool {
        match self {
            LlmError::Http(_)
            | LlmError::EmptyCompletion
            | LlmError::UnsupportedParameter(_)
            | LlmError::Decode(_) => true,
            LlmError::InvalidRequest(_) | LlmError::Cache(_) => false,
            LlmError::Node { source, .. } => source.is_upstream(),
        }
    }

    /// HTTP status of the underlying failure, when there is one.
    pub fn status(&self) -> Option<u16> {
        match self {
            LlmError::Http(f) => f.status,
            LlmError::Node { source, .. } => source.status(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Usage,
    /// Served from the response cache.
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model: String,
    pub prompt: String,
    pub decoding: DecodingConfig,
    pub max_tokens: u32,
    pub cache_key: String,
}

#[derive(Serialize)]
struct KeyFields<'a> {
    model: &'a str,
    prompt: &'a str,
    decoding: &'a DecodingConfig,
    max_tokens: u32,
}

impl GenerationRequest {
    pub fn new(model: impl Into<String>, prompt: impl Into<String>, decoding: DecodingConfig, max_tokens: u32) -> Self {
        let model = model.into();
        let prompt = prompt.into();
        let canonical = serde_json::to_vec(&KeyFields {
            model: &model,
            prompt: &prompt,
            decoding: &decoding,
            max_tokens,
        })
        .expect("request fields serialize");
        let cache_key = hex::encode(Sha256::digest(&canonical));
        GenerationRequest {
            model,
            prompt,
            decoding,
            max_tokens,
            cache_key,
        }
    }

    /// Extension parameters outside the core OpenAI schema, as (name, value).
    fn extension_params(&self) -> Vec<(&'static str, Value)> {
        match self.decoding {
            DecodingConfig::TopK { top_k } => vec![("top_k", json!(top_k))],
            DecodingConfig::Eta { eta } => vec![("eta_cutoff", json!(eta))],
            _ => Vec::new(),
        }
    }

    /// OpenAI chat-completions request body.
    pub fn wire_body(&self) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": self.prompt}],
            "max_tokens": self.max_tokens,
            "temperature": self.decoding.temperature(),
        });
        if let DecodingConfig::TemperatureTopP { top_p, .. } = self.decoding {
            body["top_p"] = json!(top_p);
        }
        for (name, value) in self.extension_params() {
            body[name] = value;
        }
        body
    }
}

/// Anything that can answer a [`GenerationRequest`].
pub trait ChatClient: Send + Sync {
    fn model(&self) -> &str;
    fn complete(&self, request: &GenerationRequest) -> Result<Completion, LlmError>;
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Base URL (e.g. `http://host:8000/v1`) or the full chat-completions URL.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub cache_dir: Option<std::path::PathBuf>,
    pub concurrency: usize,
    pub min_interval: Duration,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl ClientConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        ClientConfig {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            cache_dir: None,
            concurrency: 4,
            min_interval: Duration::ZERO,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(300),
        }
    }

    fn completions_url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_owned()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

/// Cached, rate-limited client for an OpenAI-compatible server.
pub struct HttpChatClient {
    config: ClientConfig,
    url: String,
    agent: ureq::Agent,
    cache: Option<ResponseCache>,
    gate: Gate,
    throttle: Throttle,
    capabilities: Mutex<HashMap<&'static str, bool>>,
    network_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl HttpChatClient {
    pub fn new(config: ClientConfig) -> Result<Self, LlmError> {
        let cache = config.cache_dir.as_ref().map(ResponseCache::open).transpose()?;
        Ok(HttpChatClient {
            url: config.completions_url(),
            agent: http::agent(config.timeout),
            cache,
            gate: Gate::new(config.concurrency),
            throttle: Throttle::new(config.min_interval),
            capabilities: Mutex::new(HashMap::new()),
            network_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
            config,
        })
    }

    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    fn post(&self, body: &Value) -> Result<String, http::HttpFailure> {
        let _permit = self.gate.acquire();
        self.throttle.wait();
        self.network_calls.fetch_add(1, Ordering::SeqCst);
        http::post_json(&self.agent, &self.url, self.config.api_key.as_deref(), body, self.config.retry)
    }

    /// Checks once per parameter whether the server accepts an extension
    /// field, by sending a one-token request carrying it.
    fn supports(&self, name: &'static str, value: &Value) -> Result<bool, LlmError> {
        if let Some(&known) = self.capabilities.lock().expect("capability lock").get(name) {
            return Ok(known);
        }
        let mut probe = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": "ping"}],
            "max_tokens": 1,
            "temperature": 0.0,
        });
        probe[name] = value.clone();
        let supported = match self.post(&probe) {
            Ok(_) => true,
            Err(f) if matches!(f.status, Some(400) | Some(422)) => false,
            Err(f) => return Err(LlmError::Http(f)),
        };
        self.capabilities
            .lock()
            .expect("capability lock")
            .insert(name, supported);
        Ok(supported)
    }

    fn log(&self, request: &GenerationRequest, body: &Value, response: &Value) {
        if let Some(cache) = &self.cache {
            let exchange = json!({
                "url": self.url,
                "headers": {
                    "Authorization": if self.config.api_key.is_some() { "Bearer [REDACTED]" } else { "" },
                },
                "request": body,
                "response": response,
            });
            if let Err(e) = cache.log_exchange(&request.cache_key, &exchange) {
                tracing::warn!("could not write request log: {e}");
            }
        }
    }
}

fn parse_chat_response(raw: &str) -> Result<(String, Usage, Value), LlmError> {
    let value: Value = serde_json::from_str(raw).map_err(|e| LlmError::Decode(e.to_string()))?;
    let text = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| LlmError::Decode("missing choices[0].message.content".into()))?
        .to_owned();
    let usage = Usage {
        prompt_tokens: value.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: value
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    Ok((text, usage, value))
}

impl ChatClient for HttpChatClient {
    fn model(&self) -> &str {
        &self.config.model
    }

    fn complete(&self, request: &GenerationRequest) -> Result<Completion, LlmError> {
        if let Some(entry) = self.cache.as_ref().and_then(|c| c.get(&request.cache_key)) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(Completion {
                text: entry.response_text,
                usage: entry.usage,
                cached: true,
            });
        }
        for (name, value) in request.extension_params() {
            if !self.supports(name, &value)? {
                return Err(LlmError::UnsupportedParameter(name.to_owned()));
            }
        }
        let body = request.wire_body();
        let raw = self.post(&body).map_err(LlmError::Http)?;
        let (text, usage, response) = parse_chat_response(&raw)?;
        self.log(request, &body, &response);
        if text.trim().is_empty() {
            return Err(LlmError::EmptyCompletion);
        }
        if let Some(cache) = &self.cache {
            let created_at = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            cache.put(&CacheEntry {
                cache_key: request.cache_key.clone(),
                response_text: text.clone(),
                created_at,
                usage,
            })?;
        }
        Ok(Completion {
            text,
            usage,
            cached: false,
        })
    }
}

pub const SUMMARY_PROMPT_TEMPLATE: &str = "Write an accurate and engaging summary for the given text in range of {{words_range}} words using only the provided passage (might be irrelevant).\n\nUse an unbiased and journalistic tone.\n\nText: {{Text}}";

pub fn summary_prompt(words_range: (u64, u64), text: &str) -> String {
    SUMMARY_PROMPT_TEMPLATE
        .replace("{{words_range}}", &format!("{} to {}", words_range.0, words_range.1))
        .replace("{{Text}}", text)
}

/// Completion budget for a requested word range: the upper bound converted
/// to tokens plus headroom.
pub fn max_tokens_for_range(words_range: (u64, u64)) -> u32 {
    let tokens = (words_range.1 * 4).div_ceil(3) + 256;
    u32::try_from(tokens).unwrap_or(u32::MAX)
}

pub fn summary_id(document_id: &str, regime: Regime, decoding: &DecodingConfig) -> String {
    format!("{document_id}:{}:{}", regime.as_str(), decoding.label())
}

pub(crate) fn summary_meta(document: &Document, model: &str) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("model".to_owned(), model.to_owned());
    if let Some(d) = document.meta.get("dataset") {
        meta.insert("dataset".to_owned(), d.clone());
    }
    meta.insert("context_tokens".to_owned(), document.token_count.to_string());
    meta
}

/// Generates one summary of `document`. The prompt asks for 100 to 200
/// words in the standard regime and for the context-derived range in the
/// long regime.
pub fn generate_summary(
    document: &Document,
    regime: Regime,
    decoding: &DecodingConfig,
    client: &dyn ChatClient,
) -> Result<SummaryRecord, LlmError> {
    decoding
        .validate()
        .map_err(|e| LlmError::InvalidRequest(e.to_string()))?;
    let range = words_range_for_regime(regime, document.token_count);
    let request = GenerationRequest::new(
        client.model(),
        summary_prompt(range, &document.text),
        decoding.clone(),
        max_tokens_for_range(range),
    );
    let completion = client.complete(&request)?;
    if completion.text.trim().is_empty() {
        return Err(LlmError::EmptyCompletion);
    }
    Ok(SummaryRecord::new(
        summary_id(&document.id, regime, decoding),
        document.id.clone(),
        completion.text.trim(),
        regime,
        decoding.clone(),
        Provenance::Generated,
    )
    .with_meta(summary_meta(document, client.model())))
}

/// One (document, decoding) cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub document_id: String,
    pub decoding: DecodingConfig,
    pub outcome: Result<SummaryRecord, String>,
}

/// Generates a summary for every (document, decoding) pair, documents
/// outermost. Failed cells carry their error message; the sweep continues.
pub fn sweep(
    documents: &[Document],
    grid: &[DecodingConfig],
    regime: Regime,
    client: &dyn ChatClient,
    concurrency: usize,
) -> Result<Vec<SweepCell>, LlmError> {
    if grid.is_empty() {
        return Err(LlmError::InvalidRequest("decoding grid is empty".into()));
    }
    let cells: Vec<(&Document, &DecodingConfig)> = documents
        .iter()
        .flat_map(|d| grid.iter().map(move |g| (d, g)))
        .collect();
    Ok(bounded_map(&cells, concurrency, |(doc, decoding)| SweepCell {
        document_id: doc.id.clone(),
        decoding: (*decoding).clone(),
        outcome: generate_summary(doc, regime, decoding, client).map_err(|e| e.to_string()),
    }))
}
