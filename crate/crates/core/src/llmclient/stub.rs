//! Deterministic stand-in for an OpenAI-compatible server and a fact-check
//! service, used by tests and offline demos.
//!
//! Chat responses are pure functions of the prompt:
//!
//! * summary prompts copy leading source sentences up to roughly 80% of the
//!   requested lower word bound, then append two fabricated closing
//!   sentences, so summaries are faithful early and unsupported at the end;
//! * decomposition prompts return the rule-based facts as a "- " list;
//! * merge prompts concatenate the two partial summaries.
//!
//! `POST .../factcheck` answers `{"premise", "hypothesis"}` (or an array of
//! them) with ROUGE-L scores.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde_json::{json, Value};
use tiny_http::{Header, Method, Response, Server};

use super::chunk::MERGE_PROMPT;
use crate::corpus::word_count;
use crate::scorers::rouge_l;
use crate::segment::{decompose_facts_rule, split_sentences, DECOMPOSE_PROMPT};

const FABRICATED: &[&str] = &[
    "Critics widely regard the subject as a landmark that reshaped its entire field.",
    "Its legacy continues to inspire new generations of admirers around the world.",
    "Many observers believe its influence will only grow stronger in the coming decades.",
];

#[derive(Debug, Clone)]
pub struct StubConfig {
    /// Answer every chat request with this text instead of the prompt-driven reply.
    pub fixed_reply: Option<String>,
    /// Number of initial requests answered with HTTP 500.
    pub fail_first: usize,
    /// Accept the `eta_cutoff` extension field; rejected with 400 otherwise.
    pub support_eta: bool,
}

impl Default for StubConfig {
    fn default() -> Self {
        StubConfig {
            fixed_reply: None,
            fail_first: 0,
            support_eta: true,
        }
    }
}

struct State {
    config: StubConfig,
    hits: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

pub struct StubServer {
    server: Arc<Server>,
    addr: SocketAddr,
    state: Arc<State>,
    handle: Option<JoinHandle<()>>,
}

fn parse_range(prompt: &str) -> (usize, usize) {
    let parsed = prompt.split_once("in range of ").and_then(|(_, rest)| {
        let mut it = rest.split_whitespace();
        let lo = it.next()?.parse().ok()?;
        let _to = it.next()?;
        let hi = it.next()?.parse().ok()?;
        Some((lo, hi))
    });
    parsed.unwrap_or((100, 200))
}

fn stub_summary(prompt: &str) -> String {
    let (lo, hi) = parse_range(prompt);
    let text = prompt.split_once("\n\nText: ").map_or("", |(_, t)| t);
    let target = (lo * 4).div_ceil(5).max(1);
    let mut picked: Vec<&str> = Vec::new();
    let mut words = 0;
    for span in split_sentences(text) {
        if words >= target || words + span.word_len() > hi {
            break;
        }
        picked.push(span.text(text));
        words += span.word_len();
    }
    let start = text.bytes().map(usize::from).sum::<usize>() % FABRICATED.len();
    for k in 0..2 {
        picked.push(FABRICATED[(start + k) % FABRICATED.len()]);
    }
    picked.join(" ")
}

fn stub_merge(prompt: &str) -> String {
    let rest = prompt.split_once("Summary 1: ").map_or("", |(_, r)| r);
    let (left, right) = rest.split_once("\n\nSummary 2: ").unwrap_or((rest, ""));
    format!("{} {}", left.trim(), right.trim()).trim().to_owned()
}

/// The stub's reply to a chat prompt.
pub fn respond_to_prompt(prompt: &str) -> String {
    if let Some(rest) = prompt.strip_prefix(DECOMPOSE_PROMPT) {
        decompose_facts_rule(rest.trim())
            .iter()
            .map(|f| format!("- {f}"))
            .collect::<Vec<_>>()
            .join("\n")
    } else if prompt.starts_with(MERGE_PROMPT) {
        stub_merge(prompt)
    } else if prompt.starts_with("Write an accurate and engaging summary") {
        stub_summary(prompt)
    } else {
        prompt.to_owned()
    }
}

fn json_response(status: u16, body: &Value) -> Response<std::io::Cursor<Vec<u8>>> {
    Response::from_string(body.to_string())
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").expect("static header"))
}

fn error_body(message: &str) -> Value {
    json!({"error": {"message": message}})
}

fn handle_chat(state: &State, body: &Value) -> (u16, Value) {
    if !state.config.support_eta && body.get("eta_cutoff").is_some() {
        return (400, error_body("unsupported parameter: eta_cutoff"));
    }
    let prompt = body
        .pointer("/messages/0/content")
        .and_then(Value::as_str)
        .unwrap_or_default();
    state.prompts.lock().expect("prompt log").push(prompt.to_owned());
    let text = match &state.config.fixed_reply {
        Some(t) => t.clone(),
        None => respond_to_prompt(prompt),
    };
    let reply = json!({
        "id": "stub",
        "object": "chat.completion",
        "model": body.get("model").cloned().unwrap_or(Value::Null),
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": word_count(prompt), "completion_tokens": word_count(&text)},
    });
    (200, reply)
}

fn score_one(v: &Value) -> Option<Value> {
    let premise = v.get("premise")?.as_str()?;
    let hypothesis = v.get("hypothesis")?.as_str()?;
    Some(json!({"score": rouge_l(premise, hypothesis)}))
}

fn handle_factcheck(body: &Value) -> (u16, Value) {
    let scored = match body {
        Value::Array(items) => items.iter().map(score_one).collect::<Option<Vec<_>>>().map(Value::Array),
        other => score_one(other),
    };
    match scored {
        Some(v) => (200, v),
        None => (400, error_body("expected {\"premise\", \"hypothesis\"}")),
    }
}

fn serve(server: &Server, state: &State) {
    for mut request in server.incoming_requests() {
        let n = state.hits.fetch_add(1, Ordering::SeqCst);
        let mut raw = String::new();
        let (status, body) = if request.as_reader().read_to_string(&mut raw).is_err() {
            (400, error_body("unreadable body"))
        } else if n < state.config.fail_first {
            (500, error_body("injected failure"))
        } else if *request.method() != Method::Post {
            (405, error_body("POST only"))
        } else {
            match serde_json::from_str::<Value>(&raw) {
                Err(e) => (400, error_body(&e.to_string())),
                Ok(body) if request.url().ends_with("/chat/completions") => handle_chat(state, &body),
                Ok(body) if request.url().ends_with("/factcheck") => handle_factcheck(&body),
                Ok(_) => (404, error_body("unknown route")),
            }
        };
        let _ = request.respond(json_response(status, &body));
    }
}

impl StubServer {
    /// Binds an ephemeral localhost port and serves on a background thread.
    pub fn start(config: StubConfig) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0", config)
    }

    pub fn bind(addr: &str, config: StubConfig) -> std::io::Result<Self> {
        let server = Arc::new(Server::http(addr).map_err(std::io::Error::other)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("stub server has no IP address"))?;
        let state = Arc::new(State {
            config,
            hits: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
        });
        let handle = {
            let server = Arc::clone(&server);
            let state = Arc::clone(&state);
            std::thread::spawn(move || serve(&server, &state))
        };
        Ok(StubServer {
            server,
            addr,
            state,
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// OpenAI-style base URL (`http://host:port/v1`).
    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn factcheck_url(&self) -> String {
        format!("http://{}/factcheck", self.addr)
    }

    /// Requests received so far, across all routes.
    pub fn hits(&self) -> usize {
        self.state.hits.load(Ordering::SeqCst)
    }

    /// Chat prompts received so far, in arrival order.
    pub fn prompts(&self) -> Vec<String> {
        self.state.prompts.lock().expect("prompt log").clone()
    }

    /// Blocks until the server thread exits.
    pub fn wait(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
